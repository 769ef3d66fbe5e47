"""Versioned JSON model files holding a tree ensemble and a spatial field.

The layout is documented in ``docs/model-format.md``. Floats are written with
``repr`` precision, so a save/load round trip reproduces predictions exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict

import numpy as np

from .files import atomic_write_text
from .mart import BoostConfig, Ensemble
from .spatial import SpatialField
from .tree import TreeModel

FORMAT_NAME = "stmart-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _nums(a):
    return [_num(v) for v in np.asarray(a, dtype=float).ravel()]


def _unnum(v):
    return float("nan") if v is None else float(v)


def model_to_dict(ensemble: Ensemble, field: SpatialField | None = None, covariates=None, extra=None) -> dict:
    """Plain-data form of a fitted model.

    ``covariates`` is a list of ``{"name", "kind", "levels"}`` records; ``extra``
    holds ``tract_ids`` and ``time_labels`` for the spatial field.
    """
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "covariates": covariates or [
            {"name": f"x{j}", "kind": "categorical" if c else "quantitative", "levels": []}
            for j, c in enumerate(ensemble.categorical)
        ],
        "ensemble": {
            "f0": float(ensemble.f0),
            "nu": float(ensemble.nu),
            "n_features": int(ensemble.n_features),
            "categorical": [bool(c) for c in ensemble.categorical],
            "bag_fraction": float(ensemble.bag_fraction),
            "config": asdict(ensemble.config) if ensemble.config is not None else None,
            "oob_improvements": _nums(ensemble.oob_improvements),
            "train_loss": _nums(ensemble.train_loss),
            "trees": [t.to_dict() for t in ensemble.trees],
        },
        "spatial": None,
    }
    if field is not None:
        extra = extra or {}
        doc["spatial"] = {
            "tract_ids": list(extra.get("tract_ids", range(field.phi.shape[1]))),
            "time_labels": list(extra.get("time_labels", range(1, field.phi.shape[0] + 1))),
            "slots": [int(s) for s in field.slots],
            "pinned": [int(s) for s in field.pinned],
            "sigma2": float(field.sigma2),
            "tau": _nums(field.tau),
            "phi": [_nums(row) for row in field.phi],
            "method": field.method,
            "sweeps": int(field.sweeps),
            "converged": bool(field.converged),
        }
    return doc


def model_from_dict(doc: dict):
    """Inverse of :func:`model_to_dict`; returns ``(ensemble, field, doc)``."""
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError("not a stmart model file")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model file version {version} is not supported (this build reads version {FORMAT_VERSION})")
    try:
        e = doc["ensemble"]
        p = int(e["n_features"])
        cat = np.array(e["categorical"], dtype=bool)
        trees = tuple(TreeModel.from_dict(t, p, cat) for t in e["trees"])
        cfg = BoostConfig(**e["config"]) if e.get("config") else None
        ens = Ensemble(
            f0=float(e["f0"]),
            trees=trees,
            nu=float(e["nu"]),
            n_features=p,
            categorical=cat,
            oob_improvements=np.array([_unnum(v) for v in e["oob_improvements"]]),
            train_loss=np.array([_unnum(v) for v in e["train_loss"]]),
            bag_fraction=float(e["bag_fraction"]),
            config=cfg,
        )
        field = None
        s = doc.get("spatial")
        if s is not None:
            field = SpatialField(
                phi=np.array([[_unnum(v) for v in row] for row in s["phi"]], dtype=float),
                tau=np.array([_unnum(v) for v in s["tau"]], dtype=float),
                sigma2=float(s["sigma2"]),
                slots=tuple(int(v) for v in s["slots"]),
                pinned=tuple(int(v) for v in s["pinned"]),
                sweeps=int(s["sweeps"]),
                converged=bool(s["converged"]),
                method=s["method"],
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    return ens, field, doc


def dumps_model(ensemble, field=None, covariates=None, extra=None) -> str:
    doc = model_to_dict(ensemble, field, covariates, extra)
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_model(path, ensemble: Ensemble, field: SpatialField | None = None, covariates=None, extra=None):
    atomic_write_text(path, dumps_model(ensemble, field, covariates, extra))


def load_model(path):
    """Read a model file; returns ``(ensemble, field, doc)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: truncated or invalid model file ({exc})") from None
    return model_from_dict(doc)
