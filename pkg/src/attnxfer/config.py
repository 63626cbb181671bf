"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must be one of the
fields of :class:`RunConfig`; values are parsed according to the field type.

Keys
----
Synthetic data: ``n_concepts``, ``image_size``, ``frames_per_video``,
``source_per_class``, ``train_videos_per_class``, ``test_videos_per_class``,
``source_noise``, ``target_noise``, ``source_contrast``, ``target_contrast``,
``tint``, ``tint_correlation``, ``position_jitter``, ``frame_jitter``.

Source classifier: ``channels``, ``pretrain_epochs``, ``pretrain_batch``,
``pretrain_lr``, ``pretrain_wd``, ``hflip``.

Video classification: ``window`` (sliding window size s), ``stride``
(frame subsampling k), ``cnn_average_all``.

EnergyNet: ``margin`` (m), ``beta``, ``lambda_t``, ``embed_dim`` (d),
``hidden`` (H), ``en_lr``, ``en_wd``, ``mine_k`` (K), ``mine_r`` (R),
``batch_small``, ``batch_large``, ``tau``, ``en_epochs``, ``embedding_file``
(empty for one-hot concept vectors).

``seed`` seeds every stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields


@dataclass
class RunConfig:
    # synthetic data
    n_concepts: int = 4
    image_size: int = 24
    frames_per_video: int = 20
    source_per_class: int = 100
    train_videos_per_class: int = 2
    test_videos_per_class: int = 8
    source_noise: float = 0.05
    target_noise: float = 0.12
    source_contrast: float = 1.0
    target_contrast: float = 0.7
    tint: float = 0.15
    tint_correlation: float = 0.8
    position_jitter: int = 2
    frame_jitter: int = 1
    # source classifier
    channels: int = 8
    pretrain_epochs: int = 30
    pretrain_batch: int = 16
    pretrain_lr: float = 0.2
    pretrain_wd: float = 5e-4
    hflip: bool = True
    # video classification
    window: int = 3
    stride: int = 5
    cnn_average_all: bool = False
    # EnergyNet
    margin: float = 1.0
    beta: float = 0.5
    lambda_t: float = 1.0
    embed_dim: int = 64
    hidden: int = 128
    en_lr: float = 0.01
    en_wd: float = 5e-4
    mine_k: int = 16
    mine_r: int = 4
    batch_small: int = 32
    batch_large: int = 256
    tau: float = 0.5
    en_epochs: int = 300
    embedding_file: str = ""
    seed: int = 0

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(value: str, kind):
    if kind in (bool, "bool"):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def loads_config(text: str, source: str = "<config>") -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse(value, types[key])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read(), str(path))
