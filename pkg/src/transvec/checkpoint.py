"""Checkpoints: named float64 tensors in an ``.npz`` plus a JSON side file.

The side file carries the stage tag (``rnnt``, ``lid`` or ``backend``), the
resolved config text and anything else a later stage has to check against.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import Config, ConfigError
from .corpus import FormatError
from .embedder import LidModel, StreamVariant
from .numkit import Param, make_rng
from .transducer import TransducerModel

STAGES = ("rnnt", "lid", "backend")


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_arrays(path, arrays: dict[str, np.ndarray], stage: str, meta: dict[str, Any]) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown checkpoint stage {stage!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: np.asarray(v) for k, v in arrays.items()})
    doc = dict(meta, stage=stage, tensors=sorted(arrays))
    _meta_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_arrays(path, stage: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        meta = json.loads(_meta_path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{_meta_path(path)}: {exc}") from exc
    if stage is not None and meta.get("stage") != stage:
        raise ConfigError(f"{path} is a {meta.get('stage')!r} checkpoint, expected {stage!r}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return arrays, meta


def params_to_arrays(params: Sequence[Param]) -> dict[str, np.ndarray]:
    out = {}
    for p in params:
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name}")
        out[p.name] = np.asarray(p.value, dtype=np.float64)
    return out


def arrays_to_params(params: Sequence[Param], arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise FormatError(f"checkpoint lacks tensor {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise FormatError(f"tensor {p.name} has shape {arrays[p.name].shape}, model expects {p.value.shape}")
        p.value[...] = arrays[p.name]


# -- model construction from config ---------------------------------------------

def build_rnnt(cfg: Config, feat_dim: int, n_tokens: int) -> TransducerModel:
    m = cfg["model"]
    return TransducerModel(feat_dim, n_tokens, make_rng(cfg["run"]["seed"], 50), enc_hidden=m["enc_hidden"],
                           enc_dim=m["enc_dim"], enc_layers=m["enc_layers"], subsample=m["subsample"],
                           pred_embed=m["pred_embed"], pred_hidden=m["pred_hidden"], pred_dim=m["pred_dim"],
                           joint_dim=m["joint_dim"])


def variant_from_config(cfg: Config) -> StreamVariant:
    lid = cfg["lid"]
    return StreamVariant(lid["variant"], lam=lid["lam"], alpha=lid["alpha"])


def build_lid(cfg: Config, rnnt: TransducerModel, n_langs: int) -> LidModel:
    return LidModel(rnnt, variant_from_config(cfg), n_langs, cfg["model"]["head_width"], tau=cfg["lid"]["tau"],
                    seed=cfg["run"]["seed"])


def save_rnnt(path, model: TransducerModel, cfg: Config, extra: dict[str, Any] | None = None) -> None:
    meta = {"config": cfg.to_text(), "feat_dim": model.encoder.feat_dim, "n_tokens": model.n_tokens}
    save_arrays(path, params_to_arrays(model.params()), "rnnt", dict(extra or {}, **meta))


def load_rnnt(path, cfg: Config) -> tuple[TransducerModel, dict[str, Any]]:
    arrays, meta = load_arrays(path, "rnnt")
    saved = Config.from_text(meta["config"])
    model = build_rnnt(saved, meta["feat_dim"], meta["n_tokens"])
    arrays_to_params(model.params(), arrays)
    return model, meta


def save_lid(path, model: LidModel, cfg: Config, extra: dict[str, Any] | None = None) -> None:
    v = model.variant
    meta = {"config": cfg.to_text(), "feat_dim": model.rnnt.encoder.feat_dim, "n_tokens": model.rnnt.n_tokens,
            "n_langs": model.n_langs, "variant": v.kind, "lam": v.lam, "alpha": v.alpha, "tau": model.tau}
    save_arrays(path, params_to_arrays(model.params()), "lid", dict(extra or {}, **meta))


def load_lid(path, cfg: Config | None = None) -> tuple[LidModel, dict[str, Any]]:
    """Rebuild a LID model; with ``cfg`` given, refuse a variant or tau that disagrees with the checkpoint."""
    arrays, meta = load_arrays(path, "lid")
    if cfg is not None:
        want = (cfg["lid"]["variant"], float(cfg["lid"]["lam"]), float(cfg["lid"]["alpha"]), cfg["lid"]["tau"])
        have = (meta["variant"], float(meta["lam"]), float(meta["alpha"]), meta["tau"])
        if want != have:
            raise ConfigError(f"config asks for variant/lam/alpha/tau {want} but {path} was trained with {have}")
    saved = Config.from_text(meta["config"])
    rnnt = build_rnnt(saved, meta["feat_dim"], meta["n_tokens"])
    model = build_lid(saved, rnnt, meta["n_langs"])
    arrays_to_params(model.params(), arrays)
    return model, meta
