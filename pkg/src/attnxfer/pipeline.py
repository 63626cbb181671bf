"""Manifests, frame sampling, the CNN-vote baseline and the end-to-end stages.

Each ``run_*`` function reads and writes files inside a work directory so the
stages can be chained from the command line::

    <workdir>/data/{source,target-train,target-test}.jsonl   manifests + frames
    <workdir>/network.atnw          source-domain classifier
    <workdir>/attention.attc        attention maps of every target frame
    <workdir>/energynet.aten        EnergyNet weights
    <workdir>/energynet-log.jsonl   EnergyNet training log
    <workdir>/scores-<method>.jsonl video score tables
    <workdir>/report-<method>.json  evaluation report
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import embedding, energy, energynet, gradcam, metrics, netcore, synthdata
from .config import RunConfig

logger = logging.getLogger(__name__)

METHODS = ("unatt", "cnn", "energynet")


class ManifestError(ValueError):
    pass


@dataclass
class VideoRecord:
    video_id: str
    class_name: str
    split: str
    frames: list  # paths, absolute after loading

    def to_json(self, base_dir=None) -> str:
        frames = self.frames if base_dir is None else [os.path.relpath(p, base_dir) for p in self.frames]
        return json.dumps({"video_id": self.video_id, "class": self.class_name,
                           "split": self.split, "frames": frames})


def load_manifest(path, classes=None, check_files: bool = True) -> list[VideoRecord]:
    """Read and validate a JSON-lines manifest.

    Relative frame paths are resolved against the manifest's directory.
    Raises :class:`ManifestError` naming the line for duplicate ids, classes
    outside ``classes`` (when given) and missing frame files.
    """
    base = os.path.dirname(os.path.abspath(path))
    known = None if classes is None else set(classes)
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                d = json.loads(line)
                vid, cls, split, frames = d["video_id"], d["class"], d["split"], d["frames"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{where}: malformed record ({exc})") from None
            if split not in synthdata.SPLITS:
                raise ManifestError(f"{where}: unknown split {split!r}")
            if vid in seen:
                raise ManifestError(f"{where}: duplicate video_id {vid!r}")
            if known is not None and cls not in known:
                raise ManifestError(f"{where}: unknown class {cls!r}")
            if not isinstance(frames, list) or not frames:
                raise ManifestError(f"{where}: video {vid!r} has no frames")
            paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in frames]
            if check_files:
                for p in paths:
                    if not os.path.isfile(p):
                        raise ManifestError(f"{where}: missing frame file {p}")
            seen.add(vid)
            records.append(VideoRecord(vid, cls, split, paths))
    return records


def write_manifest(path, records) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json(base) + "\n")


def sample_frames(frames, k: int):
    """Every ``k``-th frame starting at index 0."""
    if k < 1:
        raise ValueError("stride must be at least 1")
    return list(frames)[::k]


def read_concepts(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


# --------------------------------------------------------------------------
# CNN-vote baseline
# --------------------------------------------------------------------------


def vote(logits, average_all: bool = False) -> tuple[int, np.ndarray]:
    """Majority class of per-frame argmaxes, ties to the lowest index.

    The video score is the mean logit vector over the frames that voted for
    the winner, or over all frames with ``average_all``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("need a non-empty (frames, classes) logit array")
    per_frame = logits.argmax(axis=1)
    winner = int(np.bincount(per_frame, minlength=logits.shape[1]).argmax())
    chosen = logits if average_all else logits[per_frame == winner]
    return winner, chosen.mean(axis=0)


def classify_cnn_vote(spec, params, frames, average_all: bool = False):
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("video has no frames")
    return vote(netcore.predict(spec, params, frames), average_all)


# --------------------------------------------------------------------------
# Score tables
# --------------------------------------------------------------------------


def write_scores(path, rows) -> None:
    """``rows``: iterable of ``(video_id, scores, n_frames)``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for vid, scores, n_frames in rows:
            fh.write(json.dumps({"video_id": vid, "scores": [float(s) for s in scores],
                                 "n_frames": int(n_frames)}) + "\n")


def read_scores(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["video_id"]] = np.array(d["scores"], dtype=np.float64)
    return out


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def _paths(workdir):
    data = os.path.join(workdir, "data")
    return {
        "data": data,
        "concepts": os.path.join(data, "concepts.txt"),
        "network": os.path.join(workdir, "network.atnw"),
        "pretrain_log": os.path.join(workdir, "pretrain-log.jsonl"),
        "cache": os.path.join(workdir, "attention.attc"),
        "energynet": os.path.join(workdir, "energynet.aten"),
        "energynet_log": os.path.join(workdir, "energynet-log.jsonl"),
        **{split: os.path.join(data, f"{split}.jsonl") for split in synthdata.SPLITS},
    }


def synth_config(cfg: RunConfig) -> synthdata.SynthConfig:
    names = {f for f in synthdata.SynthConfig.__dataclass_fields__}
    return synthdata.SynthConfig(**{k: v for k, v in cfg.to_dict().items() if k in names})


def run_synth(cfg: RunConfig, workdir) -> dict:
    data = synthdata.generate(synth_config(cfg))
    return synthdata.write_dataset(data, _paths(workdir)["data"])


def _load_split(workdir, split, concepts):
    return load_manifest(_paths(workdir)[split], classes=concepts)


def _frames(record: VideoRecord) -> np.ndarray:
    return np.stack([synthdata.read_image(p) for p in record.frames])


def run_pretrain(cfg: RunConfig, workdir) -> list:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    records = _load_split(workdir, "source", concepts)
    images = np.concatenate([_frames(r) for r in records])
    labels = np.concatenate([[concepts.index(r.class_name)] * len(r.frames) for r in records])
    spec = netcore.default_spec(len(concepts), image_size=images.shape[-1], channels=cfg.channels,
                                in_channels=images.shape[1])
    tc = netcore.TrainConfig(cfg.pretrain_epochs, cfg.pretrain_batch, cfg.pretrain_lr, cfg.pretrain_wd,
                             cfg.seed, cfg.hflip)
    result = netcore.train_classifier(spec, images, labels, tc)
    netcore.save_network(p["network"], spec, result.params)
    with open(p["pretrain_log"], "w", encoding="utf-8", newline="\n") as fh:
        for epoch, loss in enumerate(result.epoch_losses):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}, sort_keys=True) + "\n")
    return result.epoch_losses


def run_cache(cfg: RunConfig, workdir) -> gradcam.AttentionCache:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    spec, params = netcore.load_network(p["network"])
    videos = []
    for split in ("target-train", "target-test"):
        videos.extend((r.video_id, r.frames) for r in _load_split(workdir, split, concepts))
    return gradcam.precompute_cache(spec, params, videos, p["cache"])


def _vocabulary(cfg: RunConfig, concepts):
    if cfg.embedding_file:
        return embedding.load_embeddings(cfg.embedding_file, concepts)
    return embedding.one_hot_vocabulary(concepts)


def _video_stacks(cache, record, n, stride):
    frames = sample_frames(range(len(record.frames)), stride)
    return cache.video_stacks(record.video_id, n, frames)


def run_classify_unatt(cfg: RunConfig, workdir, split: str = "target-test") -> str:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    cache = gradcam.AttentionCache.load(p["cache"])
    rows = []
    for r in _load_split(workdir, split, concepts):
        _, table = energy.classify_unatt(_video_stacks(cache, r, len(concepts), cfg.stride), cfg.window)
        rows.append((r.video_id, table.scores, table.n_frames))
    out = os.path.join(workdir, "scores-unatt.jsonl")
    write_scores(out, rows)
    return out


def run_classify_cnn(cfg: RunConfig, workdir, split: str = "target-test") -> str:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    spec, params = netcore.load_network(p["network"])
    rows = []
    for r in _load_split(workdir, split, concepts):
        frames = _frames(r)[:: cfg.stride]
        _, scores = classify_cnn_vote(spec, params, frames, cfg.cnn_average_all)
        rows.append((r.video_id, scores, len(frames)))
    out = os.path.join(workdir, "scores-cnn.jsonl")
    write_scores(out, rows)
    return out


def energynet_config(cfg: RunConfig) -> energynet.EnergyNetConfig:
    return energynet.EnergyNetConfig(
        margin=cfg.margin, beta=cfg.beta, lambda_t=cfg.lambda_t, d=cfg.embed_dim, hidden=cfg.hidden,
        lr=cfg.en_lr, wd=cfg.en_wd, k=cfg.mine_k, r=cfg.mine_r, batch_small=cfg.batch_small,
        batch_large=cfg.batch_large, tau=cfg.tau, epochs=cfg.en_epochs, seed=cfg.seed,
    )


def training_samples(cache, records, concepts, stride) -> list:
    samples = []
    for r in records:
        label = concepts.index(r.class_name)
        for f in sample_frames(range(len(r.frames)), stride):
            samples.append(energynet.TrainSample(r.video_id, f, label, cache.stack(r.video_id, f, len(concepts))))
    return samples


def run_train_energynet(cfg: RunConfig, workdir) -> energynet.EnergyNetResult:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    cache = gradcam.AttentionCache.load(p["cache"])
    samples = training_samples(cache, _load_split(workdir, "target-train", concepts), concepts, cfg.stride)
    result = energynet.train_energynet(samples, _vocabulary(cfg, concepts), energynet_config(cfg))
    energynet.save_energynet(p["energynet"], result.params)
    energynet.write_log(p["energynet_log"], result.log)
    return result


def run_classify_energynet(cfg: RunConfig, workdir, split: str = "target-test") -> str:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    cache = gradcam.AttentionCache.load(p["cache"])
    params = energynet.load_energynet(p["energynet"])
    vocab = _vocabulary(cfg, concepts)
    rows = []
    for r in _load_split(workdir, split, concepts):
        _, table = energynet.classify_energynet(_video_stacks(cache, r, len(concepts), cfg.stride), vocab, params)
        rows.append((r.video_id, table.scores, table.n_frames))
    out = os.path.join(workdir, "scores-energynet.jsonl")
    write_scores(out, rows)
    return out


def evaluate_scores(cfg: RunConfig, workdir, scores_path, split: str = "target-test") -> metrics.EvalReport:
    p = _paths(workdir)
    concepts = read_concepts(p["concepts"])
    records = _load_split(workdir, split, concepts)
    table = read_scores(scores_path)
    missing = [r.video_id for r in records if r.video_id not in table]
    if missing:
        raise ValueError(f"no scores for videos: {', '.join(missing[:5])}")
    labels = [concepts.index(r.class_name) for r in records]
    scores = np.stack([table[r.video_id] for r in records])
    meta = {"seed": cfg.seed, "config_hash": cfg.hash(), "scores": os.path.basename(scores_path), "split": split}
    return metrics.evaluate(labels, scores, concepts, meta)


def run_eval(cfg: RunConfig, workdir, method: str = "unatt", out=None) -> metrics.EvalReport:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    report = evaluate_scores(cfg, workdir, os.path.join(workdir, f"scores-{method}.jsonl"))
    out = out or os.path.join(workdir, f"report-{method}.json")
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json(timestamp=stamp))
    return report


def report_digest(path) -> str:
    """SHA-256 of a report file with the timestamp removed."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    d.get("metadata", {}).pop("timestamp", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()
