"""End-to-end experiment pipeline over a synthetic corpus.

Steps (each a function, all driven by one PipelineConfig):
  synth -> train-net -> extract-embeddings ┬-> train-backend -> score -> eval
           extract-stats -> train-ivector -> extract-ivectors ┘

Two systems come out of one trained network: the discriminative utterance
embedding (classifier bottleneck) and the generative latent vector built
from the network's own features and aggregation-head posteriors. Every
written artifact gets a provenance sidecar (config hash, seed, input
hashes; no timestamps, so identical runs give identical bytes).
"""

import hashlib
import json
import multiprocessing
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from .aggregation import (AGGREGATION_KINDS, LdeHead, MeanStdPool,
                          build_aggregation_head, lde_posterior, netvlad_posterior)
from .backend import Backend, fit_backend, read_backend, write_backend
from .corpus import (CorpusManifest, SynthSpec, apply_cmn, generate_synthetic_corpus,
                     make_trials, read_manifest, read_trials, write_manifest, write_trials)
from .frame_net import build_frame_network
from .ivector import (extract_ivector, posterior, posterior_trace, read_extractor,
                      sample_ivectors, train_extractor, write_extractor,
                      write_sampled_csv, write_trace_csv)
from .metrics import DcfParams, ScoredTrials, det_points, metrics_report, write_det_csv
from .numerics import make_rng
from .suffstats import accumulate_stats, read_stats, write_stats
from .training import (ClassifierHead, SpeakerNet, TrainConfig, load_checkpoint,
                       save_checkpoint, train, write_loss_curve)

VECTORS_MAGIC = b"NIVE"


class ConfigError(Exception):
    """Invalid configuration or refused overwrite (exit code 2)."""


class MissingInputError(Exception):
    """A required input artifact does not exist (exit code 3)."""


class CheckFailureError(Exception):
    """A verification failed: gradient suite or provenance hash (exit 5)."""


@dataclass
class PipelineConfig:
    workdir: str = "work"
    seed: int = 0
    jobs: int = 1
    # synthetic corpus
    num_speakers: int = 40
    utts_per_speaker: int = 20
    feature_dim: int = 20
    min_frames: int = 200
    max_frames: int = 400
    speaker_dim: int = 5
    channel_noise: float = 0.3
    eval_speakers: int = 10
    num_target_trials: int = 500
    num_nontarget_trials: int = 500
    apply_cmn: bool = True
    # model
    arch: str = "tdnn-res-se"
    aggregation: str = "lde-shared-diag"
    width: int = 32
    head_dim: int = 16
    num_clusters: int = 8
    embed_dim: int = 48
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        crop_frames=150, batch_size=32, epochs=16, segments_per_speaker=32))
    # generative path
    latent_dim: int = 32
    em_iters: int = 5
    # backend
    cohort_size: int = 2000
    top_k: int = 200
    plda_iters: int = 10

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.arch not in ("tdnn", "tdnn-se", "tdnn-res-se"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.aggregation not in AGGREGATION_KINDS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if not 0 < self.eval_speakers < self.num_speakers:
            raise ConfigError("eval_speakers must be in (0, num_speakers)")
        if self.num_speakers - self.eval_speakers < 2:
            raise ConfigError("need at least 2 training speakers")
        if self.utts_per_speaker < 2:
            raise ConfigError("utts_per_speaker must be >= 2")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames")
        for name in ("feature_dim", "width", "head_dim", "num_clusters", "embed_dim",
                     "latent_dim", "em_iters", "cohort_size", "top_k", "plda_iters",
                     "num_target_trials", "num_nontarget_trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise MissingInputError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())

    def content_hash(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def toy_config(workdir="work", seed=0) -> PipelineConfig:
    """The bundled desk-scale configuration; finishes in minutes on a CPU."""
    return PipelineConfig(workdir=workdir, seed=seed)


class Paths:
    def __init__(self, workdir):
        self.workdir = workdir
        self.corpus_dir = os.path.join(workdir, "corpus")
        self.manifest = os.path.join(self.corpus_dir, "manifest.tsv")
        self.train_manifest = os.path.join(workdir, "train_manifest.tsv")
        self.eval_manifest = os.path.join(workdir, "eval_manifest.tsv")
        self.trials = os.path.join(workdir, "trials.tsv")
        self.model = os.path.join(workdir, "model.nivc")
        self.loss_csv = os.path.join(workdir, "loss_curve.csv")
        self.loss_png = os.path.join(workdir, "loss_curve.png")
        self.emb_train = os.path.join(workdir, "embeddings_train.nive")
        self.emb_eval = os.path.join(workdir, "embeddings_eval.nive")
        self.emb_png = os.path.join(workdir, "embeddings_eval.png")
        self.stats_train_dir = os.path.join(workdir, "stats_train")
        self.stats_eval_dir = os.path.join(workdir, "stats_eval")
        self.extractor = os.path.join(workdir, "extractor.nivt")
        self.em_csv = os.path.join(workdir, "extractor_objective.csv")
        self.ivec_train = os.path.join(workdir, "ivectors_train.nive")
        self.ivec_eval = os.path.join(workdir, "ivectors_eval.nive")
        self.ivec_png = os.path.join(workdir, "ivectors_eval.png")
        self.ivec_samples_csv = os.path.join(workdir, "ivector_samples.csv")
        self.ivec_samples_png = os.path.join(workdir, "ivector_samples.png")
        self.ivec_trace_csv = os.path.join(workdir, "ivector_trace.csv")
        self.ivec_trace_png = os.path.join(workdir, "ivector_trace.png")
        self.backend_emb = os.path.join(workdir, "backend_embedding.nivb")
        self.backend_ivec = os.path.join(workdir, "backend_ivector.nivb")
        self.scores_emb = os.path.join(workdir, "scores_embedding.tsv")
        self.scores_ivec = os.path.join(workdir, "scores_ivector.tsv")
        self.det_emb = os.path.join(workdir, "det_embedding.csv")
        self.det_ivec = os.path.join(workdir, "det_ivector.csv")
        self.det_png = os.path.join(workdir, "det.png")
        self.report = os.path.join(workdir, "report.json")


SYSTEMS = (("deep_embedding", "emb"), ("ivector", "ivec"))


# --- provenance ---

def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_provenance(artifact, cfg, inputs):
    record = {
        "artifact_sha256": _sha256_file(artifact),
        "config_sha256": cfg.content_hash(),
        "seed": cfg.seed,
        "inputs": {os.path.basename(p): _sha256_file(p) for p in inputs},
        "tool_version": __version__,
    }
    with open(artifact + ".prov.json", "w", encoding="utf-8") as f:
        json.dump(record, f, sort_keys=True, indent=2)
        f.write("\n")


def _require_input(path):
    if not os.path.exists(path):
        raise MissingInputError(f"missing input artifact: {path}")
    prov = path + ".prov.json"
    if os.path.exists(prov):
        with open(prov, "r", encoding="utf-8") as f:
            record = json.load(f)
        actual = _sha256_file(path)
        if record.get("artifact_sha256") not in (None, actual):
            raise CheckFailureError(
                f"{path}: content hash {actual[:12]} does not match its "
                f"provenance record {record['artifact_sha256'][:12]}")
    return path


def _guard_output(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"refusing to overwrite {path} (use --force)")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


# --- vector container ---

def write_vectors(path, ids, matrix):
    from .blobio import write_blob
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("need one row per id")
    write_blob(path, VECTORS_MAGIC, {"kind": "vectors", "ids": list(ids)},
               [("vectors", matrix)])


def read_vectors(path):
    from .blobio import read_blob
    header, arrays = read_blob(path, VECTORS_MAGIC)
    return list(header["ids"]), arrays["vectors"]


# --- corpus helpers ---

def _splits(cfg, manifest: CorpusManifest):
    speakers = sorted(manifest.speakers())
    eval_spk = speakers[-cfg.eval_speakers:]
    train_spk = speakers[:-cfg.eval_speakers]
    return manifest.subset(train_spk), manifest.subset(eval_spk)


def _load_frames(manifest, utt_id, cmn):
    seq = manifest.load(utt_id)
    return apply_cmn(seq).frames if cmn else seq.frames


def _posterior_fn(agg_head):
    if isinstance(agg_head, MeanStdPool):
        raise ConfigError(
            "aggregation 'meanstd' computes no posteriors; the generative "
            "path needs lde-iso, lde-shared-diag, netvlad, or hybrid")
    params = agg_head.posterior_params()
    if isinstance(agg_head, LdeHead):
        return lambda feats: lde_posterior(feats, params)
    return lambda feats: netvlad_posterior(feats, params)


# --- steps ---

def step_synth(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    _guard_output(paths.manifest, force)
    spec = SynthSpec(
        num_speakers=cfg.num_speakers, utts_per_speaker=cfg.utts_per_speaker,
        min_frames=cfg.min_frames, max_frames=cfg.max_frames,
        feature_dim=cfg.feature_dim, speaker_dim=cfg.speaker_dim,
        channel_noise=cfg.channel_noise, seed=cfg.seed)
    manifest = generate_synthetic_corpus(spec, paths.corpus_dir)
    train_man, eval_man = _splits(cfg, manifest)
    write_manifest(train_man, _guard_output(paths.train_manifest, force))
    write_manifest(eval_man, _guard_output(paths.eval_manifest, force))
    trials = make_trials(eval_man, cfg.num_target_trials, cfg.num_nontarget_trials,
                         cfg.seed)
    write_trials(trials, _guard_output(paths.trials, force))
    for p in (paths.manifest, paths.train_manifest, paths.eval_manifest, paths.trials):
        _write_provenance(p, cfg, [])
    return manifest


def build_model(cfg: PipelineConfig, num_speakers, rng) -> SpeakerNet:
    net = build_frame_network(cfg.arch, cfg.feature_dim, width=cfg.width,
                              out_dim=cfg.head_dim, rng=rng)
    head = build_aggregation_head(cfg.aggregation, cfg.head_dim,
                                  cfg.num_clusters, rng=rng)
    classifier = ClassifierHead(head.out_dim, cfg.embed_dim, num_speakers, rng)
    return SpeakerNet(net, head, classifier)


def step_train_net(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    manifest = read_manifest(_require_input(paths.train_manifest), paths.corpus_dir)
    _guard_output(paths.model, force)
    speakers = sorted(manifest.speakers())
    rng = make_rng(cfg.seed, "model", "init")
    model = build_model(cfg, len(speakers), rng)
    transform = (lambda s: apply_cmn(s)) if cfg.apply_cmn else None
    result = train(model, manifest, cfg.train, transform=transform,
                   loss_curve_path=_guard_output(paths.loss_csv, force))
    save_checkpoint(model, paths.model,
                    meta={"speakers": speakers, "apply_cmn": cfg.apply_cmn,
                          "aggregation": cfg.aggregation,
                          "final_accuracy": result.final_accuracy,
                          "diverged": result.diverged})
    from .plots import plot_loss_curve
    plot_loss_curve(result.loss_curve, paths.loss_png)
    _write_provenance(paths.model, cfg, [paths.train_manifest])
    _write_provenance(paths.loss_csv, cfg, [paths.train_manifest])
    return result


_WORKER = {}


def _worker_init(model_path, manifest_path, corpus_root, cmn):
    model, meta = load_checkpoint(model_path)
    _WORKER["model"] = model
    _WORKER["manifest"] = read_manifest(manifest_path, corpus_root)
    _WORKER["cmn"] = cmn


def _worker_embed(utt_id):
    frames = _load_frames(_WORKER["manifest"], utt_id, _WORKER["cmn"])
    return _WORKER["model"].embed(frames)


def _worker_stats(utt_id):
    model = _WORKER["model"]
    frames = _load_frames(_WORKER["manifest"], utt_id, _WORKER["cmn"])
    feats = model.frame_features(frames)
    gamma = _posterior_fn(model.agg)(feats)
    return accumulate_stats(feats, gamma, diag=True)


def _map_utterances(fn, model_path, manifest_path, corpus_root, cmn, utt_ids, jobs):
    """Ordered map of fn over utterance ids, optionally in worker processes."""
    if jobs <= 1:
        _worker_init(model_path, manifest_path, corpus_root, cmn)
        return [fn(u) for u in utt_ids]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(jobs, initializer=_worker_init,
                  initargs=(model_path, manifest_path, corpus_root, cmn)) as pool:
        return pool.map(fn, utt_ids)


def step_extract_embeddings(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    _require_input(paths.model)
    _, meta = load_checkpoint(paths.model)
    for man_path, out_path in ((paths.train_manifest, paths.emb_train),
                               (paths.eval_manifest, paths.emb_eval)):
        manifest = read_manifest(_require_input(man_path), paths.corpus_dir)
        _guard_output(out_path, force)
        ids = [e.utterance_id for e in manifest.entries]
        vecs = _map_utterances(_worker_embed, paths.model, man_path,
                               paths.corpus_dir, meta["apply_cmn"], ids, cfg.jobs)
        write_vectors(out_path, ids, np.stack(vecs))
        _write_provenance(out_path, cfg, [paths.model, man_path])
    ids, vecs = read_vectors(paths.emb_eval)
    manifest = read_manifest(paths.eval_manifest, paths.corpus_dir)
    spk_of = {e.utterance_id: e.speaker_id for e in manifest.entries}
    from .plots import plot_vector_scatter
    plot_vector_scatter(vecs, [spk_of[u] for u in ids], paths.emb_png,
                        title="eval embeddings")


def step_extract_stats(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    _require_input(paths.model)
    _, meta = load_checkpoint(paths.model)
    for man_path, out_dir in ((paths.train_manifest, paths.stats_train_dir),
                              (paths.eval_manifest, paths.stats_eval_dir)):
        manifest = read_manifest(_require_input(man_path), paths.corpus_dir)
        os.makedirs(out_dir, exist_ok=True)
        ids = [e.utterance_id for e in manifest.entries]
        first = os.path.join(out_dir, f"{ids[0]}.nivs")
        if os.path.exists(first) and not force:
            raise ConfigError(f"refusing to overwrite {first} (use --force)")
        stats_list = _map_utterances(_worker_stats, paths.model, man_path,
                                     paths.corpus_dir, meta["apply_cmn"], ids, cfg.jobs)
        for utt_id, stats in zip(ids, stats_list):
            write_stats(stats, os.path.join(out_dir, f"{utt_id}.nivs"))
    # A single provenance record stands in for the per-utterance files.
    marker = os.path.join(paths.stats_train_dir, "stats.done")
    with open(marker, "w", encoding="utf-8") as f:
        f.write("ok\n")
    _write_provenance(marker, cfg, [paths.model])


def _read_split_stats(paths, manifest_path, stats_dir, corpus_dir):
    manifest = read_manifest(_require_input(manifest_path), corpus_dir)
    ids = [e.utterance_id for e in manifest.entries]
    stats_list = []
    for utt_id in ids:
        p = os.path.join(stats_dir, f"{utt_id}.nivs")
        if not os.path.exists(p):
            raise MissingInputError(f"missing statistics file: {p}")
        stats_list.append(read_stats(p))
    return manifest, ids, stats_list


def step_train_ivector(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    _, _, stats_list = _read_split_stats(paths, paths.train_manifest,
                                         paths.stats_train_dir, paths.corpus_dir)
    _guard_output(paths.extractor, force)
    rng = make_rng(cfg.seed, "ivector", "init")
    ext, objectives = train_extractor(stats_list, cfg.latent_dim,
                                      num_iters=cfg.em_iters, rng=rng)
    write_extractor(ext, paths.extractor)
    with open(_guard_output(paths.em_csv, force), "w", encoding="utf-8") as f:
        f.write("iteration,objective\n")
        for i, obj in enumerate(objectives):
            f.write(f"{i},{obj:.10g}\n")
    _write_provenance(paths.extractor, cfg, [paths.train_manifest])
    return objectives


def step_extract_ivectors(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    ext = read_extractor(_require_input(paths.extractor))
    for man_path, stats_dir, out_path in (
            (paths.train_manifest, paths.stats_train_dir, paths.ivec_train),
            (paths.eval_manifest, paths.stats_eval_dir, paths.ivec_eval)):
        manifest, ids, stats_list = _read_split_stats(paths, man_path, stats_dir,
                                                      paths.corpus_dir)
        _guard_output(out_path, force)
        vecs = np.stack([extract_ivector(s, ext) for s in stats_list])
        write_vectors(out_path, ids, vecs)
        _write_provenance(out_path, cfg, [paths.extractor, man_path])

    # Posterior diagnostics on the evaluation split: sampled latent vectors
    # for a handful of utterances, and uncertainty against duration.
    manifest, ids, stats_list = _read_split_stats(paths, paths.eval_manifest,
                                                  paths.stats_eval_dir, paths.corpus_dir)
    sample_ids = ids[:5]
    draws = []
    for utt_id, stats in zip(sample_ids, stats_list[:5]):
        post = posterior(stats, ext)
        rng = make_rng(cfg.seed, "ivector", "sample", utt_id)
        draws.append(sample_ivectors(post, 50, rng))
    write_sampled_csv(_guard_output(paths.ivec_samples_csv, force), sample_ids, draws)
    trace_rows = []
    for e, stats in zip(manifest.entries, stats_list):
        seq = manifest.load(e.utterance_id)
        trace_rows.append((e.utterance_id, seq.duration,
                           posterior_trace(posterior(stats, ext))))
    write_trace_csv(_guard_output(paths.ivec_trace_csv, force), trace_rows)

    from .plots import plot_trace_vs_duration, plot_vector_scatter
    all_draws = np.concatenate(draws)
    draw_labels = np.repeat(sample_ids, [d.shape[0] for d in draws])
    plot_vector_scatter(all_draws, draw_labels, paths.ivec_samples_png,
                        title="posterior draws")
    plot_trace_vs_duration(trace_rows, paths.ivec_trace_png)
    ids, vecs = read_vectors(paths.ivec_eval)
    spk_of = {e.utterance_id: e.speaker_id for e in manifest.entries}
    plot_vector_scatter(vecs, [spk_of[u] for u in ids], paths.ivec_png,
                        title="eval latent vectors")


def _available_systems(cfg):
    if cfg.aggregation == "meanstd":
        return [s for s in SYSTEMS if s[0] == "deep_embedding"]
    return list(SYSTEMS)


def step_train_backend(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    manifest = read_manifest(_require_input(paths.train_manifest), paths.corpus_dir)
    spk_of = {e.utterance_id: e.speaker_id for e in manifest.entries}
    for system, tag in _available_systems(cfg):
        vec_path = paths.emb_train if tag == "emb" else paths.ivec_train
        out_path = paths.backend_emb if tag == "emb" else paths.backend_ivec
        ids, vecs = read_vectors(_require_input(vec_path))
        _guard_output(out_path, force)
        labels = [spk_of[u] for u in ids]
        rng = make_rng(cfg.seed, "backend", system)
        backend = fit_backend(vecs, labels, cohort_size=cfg.cohort_size,
                              top_k=cfg.top_k, plda_iters=cfg.plda_iters, rng=rng)
        write_backend(backend, out_path)
        _write_provenance(out_path, cfg, [vec_path, paths.train_manifest])


def _score_one(cfg, paths, vec_path, backend_path, out_path, force):
    trials = read_trials(_require_input(paths.trials))
    ids, vecs = read_vectors(_require_input(vec_path))
    backend = read_backend(_require_input(backend_path))
    _guard_output(out_path, force)
    row_of = {u: i for i, u in enumerate(ids)}
    needed = {t.enroll_id for t in trials.trials} | {t.test_id for t in trials.trials}
    missing = sorted(u for u in needed if u not in row_of)
    if missing:
        raise MissingInputError(f"trial utterances absent from {vec_path}: {missing[:5]}")
    projected = backend.project(vecs)
    enroll = projected[[row_of[t.enroll_id] for t in trials.trials]]
    test = projected[[row_of[t.test_id] for t in trials.trials]]
    raw, normalized = backend.score_trials(enroll, test)
    with open(out_path, "w", encoding="utf-8") as f:
        for t, r, s in zip(trials.trials, raw, normalized):
            f.write(f"{t.enroll_id}\t{t.test_id}\t{r:.10g}\t{s:.10g}\n")
    _write_provenance(out_path, cfg, [vec_path, backend_path, paths.trials])


def step_score(cfg: PipelineConfig, force=False):
    paths = Paths(cfg.workdir)
    for system, tag in _available_systems(cfg):
        if tag == "emb":
            _score_one(cfg, paths, paths.emb_eval, paths.backend_emb,
                       paths.scores_emb, force)
        else:
            _score_one(cfg, paths, paths.ivec_eval, paths.backend_ivec,
                       paths.scores_ivec, force)


def read_scores(path):
    """Returns {(enroll_id, test_id): (raw, normalized)} preserving order."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            enroll, test, raw, norm = line.split("\t")
            out[(enroll, test)] = (float(raw), float(norm))
    return out


def step_eval(cfg: PipelineConfig, force=False, quiet=False):
    paths = Paths(cfg.workdir)
    trials = read_trials(_require_input(paths.trials))
    labeled = [t for t in trials.trials if t.label != "unk"]
    report = {"config_sha256": cfg.content_hash(), "seed": cfg.seed, "systems": {}}
    det_by_system = {}
    for system, tag in _available_systems(cfg):
        scores_path = paths.scores_emb if tag == "emb" else paths.scores_ivec
        det_path = paths.det_emb if tag == "emb" else paths.det_ivec
        if not os.path.exists(scores_path):
            raise MissingInputError(f"missing scores file: {scores_path}")
        score_of = read_scores(scores_path)
        scored = ScoredTrials(
            np.array([score_of[(t.enroll_id, t.test_id)][1] for t in labeled]),
            np.array([t.label == "tgt" for t in labeled]))
        entry = metrics_report(scored, DcfParams())
        report["systems"][system] = entry
        write_det_csv(scored, _guard_output(det_path, force))
        det_by_system[system] = det_points(scored)
        if not quiet:
            print(f"{system}: eer={entry['eer']:.6g} min_dcf={entry['min_dcf']:.6g} "
                  f"({entry['num_target']} tgt / {entry['num_nontarget']} non)")
    with open(_guard_output(paths.report, force), "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    from .plots import plot_det_curve
    plot_det_curve(det_by_system, paths.det_png)
    _write_provenance(paths.report, cfg, [paths.trials])
    return report


def run_all(cfg: PipelineConfig, force=False, quiet=False):
    step_synth(cfg, force)
    step_train_net(cfg, force)
    step_extract_embeddings(cfg, force)
    if cfg.aggregation != "meanstd":
        step_extract_stats(cfg, force)
        step_train_ivector(cfg, force)
        step_extract_ivectors(cfg, force)
    step_train_backend(cfg, force)
    step_score(cfg, force)
    return step_eval(cfg, force, quiet=quiet)
