"""Declarative run configuration: schema validation and object builders.

One YAML file drives the whole pipeline (collect → train → openloop →
control → report).  The schema is flat nested sections; unknown keys are
rejected so typos fail loudly at load time rather than silently falling
back to defaults.  Every stochastic step draws from a seed named in the
``seeds`` section, and the sha256 of the normalized configuration is
embedded in every output the commands write.

Sections (all optional except ``model`` and ``output``)
-------------------------------------------------------
model:       kind (``double-pendulum`` | ``chain``) + constructor params
seeds:       collect, tpwl, openloop (ints; defaults 0)
grid:        half_width ("pi/9" or number) + points_per_side,
             or an explicit static_inputs list
embedding:   copies, lag, obs_dim (obs_dim defaults to the model's)
collection:  any CollectionSpec field except seed (that comes from seeds)
fit:         any FitSpec field
ocp:         OCPSpec fields with scalar q_z / r_u weights and keep_outs
             as {center, radius} entries
target:      kind figure-eight (amplitude, period, duration, dt, center)
             | rest (duration, dt) | csv (path)
baselines:   tpwl / koopman toggles and their training knobs
openloop:    window, fraction, response (perlin epsilon/margin/delta …)
variants:    subset of [assm, first, zeroth] to control/evaluate
output:      run directory (relative paths resolve under $ASSM_OUT_ROOT)
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dictionary import CollectionSpec, FitSpec
from .dynamics import ChainProxyModel, DoublePendulumModel, DynamicsModel, pendulum_grid
from .embedding import EmbeddingSpec
from .errors import ValidationError
from .mpc import KeepOut, OCPSpec
from .targets import TargetTrack, figure_eight_target

Array = np.ndarray

OUTPUT_ROOT_ENV = "ASSM_OUT_ROOT"

_MODELS = {"double-pendulum": DoublePendulumModel, "chain": ChainProxyModel}

_SECTIONS = {
    "model",
    "seeds",
    "grid",
    "embedding",
    "collection",
    "fit",
    "ocp",
    "target",
    "baselines",
    "openloop",
    "variants",
    "output",
}

_SEED_NAMES = ("collect", "tpwl", "openloop")

_OCP_PASSTHROUGH = (
    "dt",
    "n_sub",
    "n_apply",
    "scp_max_iter",
    "scp_tol",
    "trust_radius",
    "trust_max",
    "slack_penalty",
    "slack_budget",
    "qp_tol",
    "qp_max_iter",
)

_BASELINE_DEFAULTS = {
    "tpwl": False,
    "koopman": False,
    "tpwl_k": 3,
    "tpwl_signals": 5,
    "tpwl_duration": 20.0,
    "tpwl_hold": 1.0,
    "tpwl_scale": 0.8,
    "tpwl_threshold": 0.10,
    "koopman_hold": 6.0,
}

_RESPONSE_DEFAULTS = {
    "kind": "perlin",
    "duration": 200.0,
    "dt": 0.01,
    "epsilon": 0.005,
    "margin": 0.9,
    "cells": 5.0,
    "delta": 0.0,
}

_OPENLOOP_DEFAULTS = {"window": 0.4, "fraction": 0.5}


def parse_angle(value) -> float:
    """Accept plain numbers or 'pi/N' / 'N*pi/M' style strings."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).replace(" ", "")
    try:
        num, _, den = text.partition("/")
        scale = 1.0
        if num.endswith("*pi") or num.endswith("pi"):
            scale = math.pi
            num = num.removesuffix("pi").removesuffix("*")
        a = float(num) if num else 1.0
        b = float(den) if den else 1.0
        return a * scale / b
    except ValueError:
        raise ValidationError(f"cannot parse angle {value!r}") from None


def _require_mapping(section, name: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ValidationError(f"config section '{name}' must be a mapping")
    return dict(section)


def _only_keys(d: dict, allowed, name: str) -> None:
    extra = set(d) - set(allowed)
    if extra:
        raise ValidationError(
            f"unknown keys in config section '{name}': {sorted(extra)}"
        )


@dataclass
class RunConfig:
    """Validated, normalized run configuration.

    ``data`` holds the normalized nested dict (defaults filled in) —
    hash that, not the raw file, so two files meaning the same run share
    one hash.
    """

    data: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValidationError("config root must be a mapping")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        _only_keys(raw, _SECTIONS, "<root>")
        data: dict = {}

        model = _require_mapping(raw.get("model"), "model")
        _only_keys(model, {"kind", "params"}, "model")
        kind = model.get("kind", "double-pendulum")
        if kind not in _MODELS:
            raise ValidationError(
                f"unknown model kind {kind!r}; choose from {sorted(_MODELS)}"
            )
        data["model"] = {"kind": kind, "params": model.get("params") or {}}

        seeds = _require_mapping(raw.get("seeds"), "seeds")
        _only_keys(seeds, _SEED_NAMES, "seeds")
        data["seeds"] = {k: int(seeds.get(k, 0)) for k in _SEED_NAMES}

        grid = _require_mapping(raw.get("grid"), "grid")
        _only_keys(grid, {"half_width", "points_per_side", "static_inputs"}, "grid")
        if "static_inputs" in grid:
            pts = [list(map(float, u)) for u in grid["static_inputs"]]
            data["grid"] = {"static_inputs": pts}
        else:
            data["grid"] = {
                "half_width": parse_angle(grid.get("half_width", "pi/9")),
                "points_per_side": int(grid.get("points_per_side", 6)),
            }

        emb = _require_mapping(raw.get("embedding"), "embedding")
        _only_keys(emb, {"copies", "lag", "obs_dim"}, "embedding")
        data["embedding"] = emb  # completed against the model later

        coll = _require_mapping(raw.get("collection"), "collection")
        coll_fields = set(CollectionSpec.__dataclass_fields__) - {"seed"}
        _only_keys(coll, coll_fields, "collection")
        data["collection"] = coll

        fit = _require_mapping(raw.get("fit"), "fit")
        _only_keys(fit, set(FitSpec.__dataclass_fields__), "fit")
        data["fit"] = fit

        ocp = _require_mapping(raw.get("ocp"), "ocp")
        _only_keys(ocp, set(_OCP_PASSTHROUGH) | {"q_z", "r_u", "keep_outs"}, "ocp")
        keep = []
        for ko in ocp.get("keep_outs") or []:
            ko = _require_mapping(ko, "ocp.keep_outs[]")
            _only_keys(ko, {"center", "radius"}, "ocp.keep_outs[]")
            keep.append(
                {"center": list(map(float, ko["center"])), "radius": float(ko["radius"])}
            )
        data["ocp"] = {k: ocp[k] for k in _OCP_PASSTHROUGH if k in ocp}
        if "q_z" in ocp:
            data["ocp"]["q_z"] = float(ocp["q_z"])
        if "r_u" in ocp:
            data["ocp"]["r_u"] = float(ocp["r_u"])
        data["ocp"]["keep_outs"] = keep

        target = _require_mapping(raw.get("target"), "target")
        _only_keys(
            target,
            {"kind", "amplitude", "period", "duration", "dt", "center", "path"},
            "target",
        )
        tkind = target.get("kind", "figure-eight")
        if tkind not in ("figure-eight", "rest", "csv"):
            raise ValidationError(f"unknown target kind {tkind!r}")
        if tkind == "csv" and "path" not in target:
            raise ValidationError("csv target needs a path")
        data["target"] = {"kind": tkind, **{k: v for k, v in target.items() if k != "kind"}}

        base = _require_mapping(raw.get("baselines"), "baselines")
        _only_keys(base, set(_BASELINE_DEFAULTS), "baselines")
        data["baselines"] = {**_BASELINE_DEFAULTS, **base}

        ol = _require_mapping(raw.get("openloop"), "openloop")
        _only_keys(ol, set(_OPENLOOP_DEFAULTS) | {"response"}, "openloop")
        resp = _require_mapping(ol.get("response"), "openloop.response")
        _only_keys(resp, set(_RESPONSE_DEFAULTS), "openloop.response")
        if resp.get("kind", "perlin") != "perlin":
            raise ValidationError("only the perlin response kind is implemented")
        data["openloop"] = {
            **_OPENLOOP_DEFAULTS,
            **{k: ol[k] for k in _OPENLOOP_DEFAULTS if k in ol},
            "response": {**_RESPONSE_DEFAULTS, **resp},
        }

        variants = raw.get("variants", ["assm", "first", "zeroth"])
        if not isinstance(variants, list) or not variants:
            raise ValidationError("variants must be a non-empty list")
        bad = set(variants) - {"assm", "first", "zeroth"}
        if bad:
            raise ValidationError(f"unknown variants: {sorted(bad)}")
        data["variants"] = list(variants)

        data["output"] = str(raw.get("output", "runs/out"))
        return cls(data)

    # -- builders ----------------------------------------------------------

    def model(self) -> DynamicsModel:
        info = self.data["model"]
        try:
            return _MODELS[info["kind"]](**info["params"])
        except TypeError as exc:
            raise ValidationError(f"bad model params: {exc}") from None

    def static_inputs(self, model: DynamicsModel) -> list:
        grid = self.data["grid"]
        if "static_inputs" in grid:
            return [np.asarray(u, dtype=float) for u in grid["static_inputs"]]
        if not isinstance(model, DoublePendulumModel):
            raise ValidationError(
                "angular grid shorthand only applies to the double pendulum; "
                "list grid.static_inputs explicitly"
            )
        # lattice of angles; the static inputs are the torques holding them
        angles = pendulum_grid(grid["half_width"], grid["points_per_side"])
        return [model.gravity_balance_input(a, b) for a, b in angles]

    def collection_spec(self) -> CollectionSpec:
        return CollectionSpec(
            seed=self.data["seeds"]["collect"], **self.data["collection"]
        )

    def fit_spec(self) -> FitSpec:
        return FitSpec(**self.data["fit"])

    def embedding_spec(self, model: DynamicsModel) -> EmbeddingSpec:
        emb = self.data["embedding"]
        lag = emb.get("lag", self.collection_spec().record_dt)
        return EmbeddingSpec(
            copies=int(emb.get("copies", 1)),
            lag=float(lag),
            obs_dim=int(emb.get("obs_dim", model.obs_dim)),
        )

    def ocp_spec(self, w: int, n_u: int) -> OCPSpec:
        ocp = dict(self.data["ocp"])
        keep = tuple(
            KeepOut(np.asarray(k["center"], dtype=float), k["radius"])
            for k in ocp.pop("keep_outs", [])
        )
        kwargs = {k: ocp[k] for k in _OCP_PASSTHROUGH if k in ocp}
        if "q_z" in ocp:
            kwargs["Q_z"] = float(ocp["q_z"]) * np.eye(w)
        if "r_u" in ocp:
            kwargs["R_u"] = float(ocp["r_u"]) * np.eye(n_u)
        return OCPSpec(keep_outs=keep, **kwargs)

    def target(self) -> TargetTrack:
        t = self.data["target"]
        if t["kind"] == "figure-eight":
            center = t.get("center")
            return figure_eight_target(
                float(t.get("amplitude", 0.3)),
                float(t.get("period", 72.0)),
                float(t.get("duration", 72.0)),
                float(t.get("dt", 0.01)),
                center=None if center is None else np.asarray(center, dtype=float),
            )
        if t["kind"] == "rest":
            duration = float(t.get("duration", 10.0))
            dt = float(t.get("dt", 0.01))
            n = int(round(duration / dt))
            times = dt * np.arange(n + 1)
            center = t.get("center")
            w = len(center) if center is not None else 2
            vals = np.zeros((w, n + 1))
            if center is not None:
                vals += np.asarray(center, dtype=float)[:, None]
            return TargetTrack(times, vals)
        from .serialize import load_target

        return load_target(t["path"])

    def output_dir(self) -> Path:
        out = Path(self.data["output"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @property
    def seeds(self) -> dict:
        return self.data["seeds"]

    @property
    def baselines(self) -> dict:
        return self.data["baselines"]

    @property
    def openloop(self) -> dict:
        return self.data["openloop"]

    @property
    def variants(self) -> list:
        return self.data["variants"]
