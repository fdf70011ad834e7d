"""Versioned, byte-reproducible model files.

A model file is a zip archive of ``.npy`` members plus a ``meta.json`` member.
Entries carry a fixed timestamp and are written in sorted order, so saving
the same model twice yields identical bytes.
"""

import io
import json
import zipfile

import numpy as np

from .exceptions import DataError
from .forest import PropensityForest, WeightedRegressionForest
from .metalearners import CateModel, LearnerKind, WeightedRidge

FORMAT = "survcate-model"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _component(est):
    if isinstance(est, WeightedRegressionForest):
        arrays = est._state_arrays()
        meta = {"type": "forest", "params": est.get_params(),
                "n_features": int(est.n_features_in_),
                "feature_names": [str(f) for f in est.feature_names_in_]}
    elif isinstance(est, PropensityForest):
        inner, arrays = _component(est.forest_)
        meta = {"type": "propensity", "params": est.get_params(), "forest": inner}
    elif isinstance(est, WeightedRidge):
        arrays = {"coef": est.coef_, "intercept": np.array([est.intercept_])}
        meta = {"type": "ridge", "params": est.get_params(), "n_features": int(est.n_features_in_)}
    else:
        raise DataError(f"cannot serialize {type(est).__name__}")
    return meta, arrays


def _restore(meta, arrays):
    kind = meta["type"]
    if kind == "forest":
        est = WeightedRegressionForest(**meta["params"])
        for name, a in arrays.items():
            setattr(est, name + "_", a)
        est.n_features_in_ = meta["n_features"]
        est.feature_names_in_ = np.array(meta["feature_names"], dtype=object)
        return est
    if kind == "propensity":
        est = PropensityForest(**meta["params"])
        est.forest_ = _restore(meta["forest"], arrays)
        est.roots_ = est.forest_.roots_
        est.n_features_in_ = est.forest_.n_features_in_
        est.feature_names_in_ = est.forest_.feature_names_in_
        est.classes_ = np.array([0, 1])
        return est
    if kind == "ridge":
        est = WeightedRidge(**meta["params"])
        est.coef_ = arrays["coef"]
        est.intercept_ = float(arrays["intercept"][0])
        est.n_features_in_ = meta["n_features"]
        return est
    raise DataError(f"unknown model component type {kind!r}")


def _npy_bytes(a):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_model(model, path):
    """Write a fitted :class:`CateModel` to ``path``."""
    meta = {"format": FORMAT, "version": VERSION, "learner": model.learner.value,
            "t_star": float(model.t_star), "feature_names": list(model.feature_names),
            "seed": int(model.seed), "components": {}}
    members = {}
    for role in ("regressor", "regressor0", "propensity"):
        est = getattr(model, role)
        if est is None:
            continue
        cmeta, arrays = _component(est)
        meta["components"][role] = cmeta
        for name, a in arrays.items():
            members[f"{role}/{name}.npy"] = _npy_bytes(a)
    members["meta.json"] = json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def load_model(path):
    """Read a model written by :func:`save_model`."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise DataError("model file lacks meta.json") from None
        if meta.get("format") != FORMAT:
            raise DataError("not a survcate model file")
        if meta.get("version") != VERSION:
            raise DataError(f"unsupported model file version {meta.get('version')}")
        parts = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                role, leaf = name[:-4].split("/", 1)
                parts.setdefault(role, {})[leaf] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False)
    comps = {role: _restore(cm, parts.get(role, {})) for role, cm in meta["components"].items()}
    return CateModel(LearnerKind(meta["learner"]), meta["t_star"], comps["regressor"],
                     comps.get("regressor0"), comps.get("propensity"),
                     meta["feature_names"], meta["seed"])
