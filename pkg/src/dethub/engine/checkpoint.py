"""Versioned checkpoint directories: ``weights.pt`` plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from ..errors import ConfigError, DataError
from ..taxonomy import DEFAULT_TOKENIZER

FORMAT_VERSION = 1


def save_checkpoint(out_dir, model, optimizer, cfg, step: int, bundles, resolver, embedder,
                    fingerprint_start: str) -> Path:
    ckpt = Path(out_dir) / "checkpoints" / f"step-{step:06d}"
    ckpt.mkdir(parents=True, exist_ok=True)
    torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict()},
               ckpt / "weights.pt")
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "total_steps": cfg.train.steps,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "embedder_id": embedder.embedder_id,
        "embedder_fingerprint": embedder.fingerprint(),
        "embedder_fingerprint_start": fingerprint_start,
        "tokenizer": DEFAULT_TOKENIZER.name,
        "adaptation_mode": cfg.adaptation.mode,
        "global_categories": list(resolver.global_categories),
        "datasets": [
            {"name": b.name, "categories": list(b.descriptor.categories),
             "max_length": b.descriptor.prompt.max_length, "size": b.descriptor.size,
             "truncated_categories": list(b.descriptor.prompt.truncated_categories)}
            for b in bundles
        ],
    }
    (ckpt / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    (Path(out_dir) / "latest_checkpoint").write_text(str(ckpt.resolve()), encoding="utf-8")
    return ckpt


def resolve_checkpoint(path) -> Path:
    path = Path(path)
    if (path / "weights.pt").exists() and (path / "manifest.json").exists():
        return path
    pointer = path / "latest_checkpoint"
    if pointer.exists():
        return Path(pointer.read_text(encoding="utf-8").strip())
    raise DataError(f"{path}: not a checkpoint directory")


def read_manifest(path) -> dict:
    path = resolve_checkpoint(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load_checkpoint(path):
    path = resolve_checkpoint(path)
    manifest = read_manifest(path)
    state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
    return state, manifest
