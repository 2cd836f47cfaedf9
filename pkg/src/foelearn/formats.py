"""On-disk formats: model files, configuration files and dataset manifests.

All three are JSON text. Floats are written with Python's shortest
round-trip representation, so loading a saved model reproduces every
coefficient bit for bit.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .bilevel import TrainConfig
from .energy import FilterBank, FoEModel
from .errors import ImageIOError, ParameterError
from .imagecore import dct_basis
from .penalty import Penalty

__all__ = [
    "MODEL_FORMAT",
    "MODEL_VERSION",
    "BASIS_ID",
    "GradcheckConfig",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "load_config",
    "save_config",
    "read_manifest",
    "write_manifest",
]

MODEL_FORMAT = "foelearn-model"
MODEL_VERSION = 1
BASIS_ID = "dct-minus-constant"


@dataclass
class GradcheckConfig:
    """Instance for the bi-level gradient check.

    ``image`` is a grayscale file; when empty a fixed synthetic image is
    used. ``alpha`` lists one weight per filter (empty: all ones).
    """

    image: str = ""
    crop: int = 16
    kernel_size: int = 3
    n_filters: int = 4
    penalty: str = "logsq"
    epsilon: float = 1e-2
    mode: str = "free"
    sigma: float = 25.0
    seed: int = 1
    filter_norm: float = 0.3
    alpha: list = None
    h: float = 3e-5
    stencil: int = 4
    gtol: float = 1e-8
    threshold: float = 1e-3

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = [0.5, 2.0, 1.3, 3.1][:self.n_filters] if self.n_filters <= 4 else []
        if self.alpha and len(self.alpha) != self.n_filters:
            raise ParameterError("alpha must list one weight per filter")
        if self.mode not in ("free", "fixed"):
            raise ParameterError(f"mode must be 'free' or 'fixed', got {self.mode!r}")
        if not (self.h > 0 and self.gtol > 0 and self.threshold > 0):
            raise ParameterError("h, gtol and threshold must be positive")
        Penalty(self.penalty, self.epsilon)

    def to_dict(self):
        return asdict(self)


_CONFIG_KINDS = {"train": TrainConfig, "gradcheck": GradcheckConfig}


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def model_to_dict(model):
    fb = model.filters
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "k": fb.k,
        "n": fb.n,
        "basis": BASIS_ID,
        "penalty": {"kind": model.penalty.kind, "epsilon": model.penalty.epsilon},
        "alpha": [float(a) for a in fb.alpha],
        "beta": [[float(b) for b in row] for row in fb.beta],
        "provenance": model.provenance,
    }


def model_from_dict(d):
    try:
        if d.get("format") != MODEL_FORMAT:
            raise ParameterError("not a model file")
        if d.get("version") != MODEL_VERSION:
            raise ParameterError(f"unsupported model version {d.get('version')!r}")
        if d.get("basis") != BASIS_ID:
            raise ParameterError(f"unknown basis {d.get('basis')!r}")
        k, n = int(d["k"]), int(d["n"])
        basis = dct_basis(k)
        beta = np.array(d["beta"], dtype=np.float64)
        alpha = np.array(d["alpha"], dtype=np.float64)
        if beta.shape != (n, basis.size) or alpha.shape != (n,):
            raise ParameterError("model arrays do not match k and n")
        pen = Penalty(d["penalty"]["kind"], d["penalty"]["epsilon"])
    except (KeyError, TypeError) as exc:
        raise ParameterError(f"malformed model file: {exc}") from exc
    return FoEModel(FilterBank(basis, beta, alpha), pen, dict(d.get("provenance") or {}))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: invalid JSON ({exc})") from exc


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def save_model(path, model):
    _write_text(path, json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path):
    return model_from_dict(_read_json(path))


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def config_from_dict(d, kind="train"):
    cls = _CONFIG_KINDS[kind]
    if not isinstance(d, dict):
        raise ParameterError("configuration must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ParameterError(f"unknown {kind} configuration keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ParameterError(str(exc)) from exc


def load_config(path, kind="train"):
    """Read a configuration; unknown keys are an error, missing keys take defaults."""
    return config_from_dict(_read_json(path), kind)


def save_config(path, cfg):
    """Write every field explicitly, defaults included."""
    _write_text(path, json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path, records):
    """One JSON object per line: clean, noisy (relative paths), sigma, seed."""
    lines = [json.dumps(r, sort_keys=True) for r in records]
    _write_text(path, "\n".join(lines) + "\n")


def read_manifest(path):
    """Records with ``clean``/``noisy`` resolved against the manifest directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rec["clean"] = str(path.parent / rec["clean"])
            rec["noisy"] = str(path.parent / rec["noisy"])
            rec["sigma"] = float(rec["sigma"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        out.append(rec)
    if not out:
        raise ParameterError(f"{path}: empty manifest")
    return out
