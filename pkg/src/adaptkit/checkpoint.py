"""Single-file checkpoint container.

Layout: a ZIP archive (stored, not compressed) holding

* ``manifest.json`` — format tag, library version, backbone id and config,
  the training config, RNG seed, per-epoch loss history, and a shape/dtype
  index of every array;
* ``arrays/<name>.npy`` — one NPY member per named parameter array.

Entries are written in sorted order with a fixed timestamp, so saving the
same checkpoint twice produces byte-identical files, and arrays round-trip
bit for bit.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

FORMAT_TAG = "adaptkit-checkpoint"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    train_config: dict
    backbone_id: str
    backbone_config: dict
    seed: int
    version: str
    history: list[dict] = field(default_factory=list)

    def save(self, path: str) -> None:
        manifest = {
            "format": FORMAT_TAG,
            "version": self.version,
            "backbone_id": self.backbone_id,
            "backbone_config": self.backbone_config,
            "train_config": self.train_config,
            "seed": self.seed,
            "history": self.history,
            "arrays": {
                name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
                for name, arr in self.arrays.items()
            },
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            _write_member(zf, "manifest.json", json.dumps(manifest, sort_keys=True).encode())
            for name in sorted(self.arrays):
                buf = io.BytesIO()
                np.save(buf, self.arrays[name], allow_pickle=False)
                _write_member(zf, f"arrays/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        try:
            zf = zipfile.ZipFile(path)
        except (OSError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
        with zf:
            try:
                manifest = json.loads(zf.read("manifest.json"))
            except KeyError as exc:
                raise CheckpointError(f"{path} has no manifest.json") from exc
            if manifest.get("format") != FORMAT_TAG:
                raise CheckpointError(f"{path} is not an adaptkit checkpoint")
            arrays = {}
            for name, meta in manifest["arrays"].items():
                try:
                    data = zf.read(f"arrays/{name}.npy")
                except KeyError as exc:
                    raise CheckpointError(f"{path} is missing array {name!r}") from exc
                arr = np.load(io.BytesIO(data), allow_pickle=False)
                if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
                    raise CheckpointError(f"array {name!r} does not match its manifest entry")
                arrays[name] = arr
        return cls(
            arrays=arrays,
            train_config=manifest["train_config"],
            backbone_id=manifest["backbone_id"],
            backbone_config=manifest["backbone_config"],
            seed=manifest["seed"],
            version=manifest["version"],
            history=manifest.get("history", []),
        )

    def require(self, prefixes: tuple[str, ...]) -> None:
        """Raise unless every prefix owns at least one array."""
        for prefix in prefixes:
            if not any(name.startswith(prefix) for name in self.arrays):
                raise CheckpointError(f"checkpoint lacks parameters for {prefix!r}")


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)
