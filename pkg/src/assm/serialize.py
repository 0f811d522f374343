"""CSV/JSON persistence for every artifact the pipeline produces.

Layout conventions
------------------
* CSV cells are written with 17 significant digits ("%.17g"), so a
  save/load round trip reproduces the doubles bit-exactly and repeated
  saves of the same data are byte-identical.
* JSON envelopes share the shape ``{"kind", "version", "model": ...}``
  with optional ``config_sha256`` and ``provenance`` entries; arrays are
  stored row-major as nested lists (Python's shortest-repr floats, also
  round-trip exact).
* A training set is a directory: one CSV per snapshot plus
  ``training_set.json`` describing the embedding, anchors, static inputs
  and train/test split.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from dataclasses import asdict

from .baselines import KoopmanPregainModel, TPWLModel
from .dictionary import (
    ASSMDictionary,
    CollectionSpec,
    CriticalManifoldMap,
    StaticDataset,
)
from .dynamics import Trajectory
from .embedding import DecayGroup, EmbeddingSpec, TrainingSet
from .errors import ValidationError
from .mpc import MPCResult
from .ssm import MONOMIAL_ORDER_TAG, StaticSSMModel
from .targets import TargetTrack

Array = np.ndarray

VERSION_TAG = "0.1.0"


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON rendering of a run configuration."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _feed_array(h, x: Array) -> None:
    x = np.ascontiguousarray(np.asarray(x, dtype=float))
    h.update(str(x.shape).encode())
    h.update(x.tobytes())


def dataset_hash(training: TrainingSet) -> str:
    """sha256 over every number a training set holds, split tags included."""
    h = hashlib.sha256()
    h.update(
        f"{training.spec.copies},{training.spec.lag:.17g},{training.spec.obs_dim}".encode()
    )
    for g in training.groups:
        _feed_array(h, g.u_s)
        _feed_array(h, g.y_s)
        h.update(",".join(g.split).encode())
        for tr in list(g.decays) + list(g.controlled):
            _feed_array(h, tr.times)
            _feed_array(h, tr.states)
            if tr.inputs is not None:
                _feed_array(h, tr.inputs)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def save_trajectory(tr: Trajectory, path, manifest: bool = True) -> Path:
    """Write ``t,x1..xn[,u1..un_u]`` rows; optionally a sidecar manifest."""
    path = Path(path)
    cols = ["t"] + [f"x{i + 1}" for i in range(tr.dim)]
    blocks = [tr.times[None, :], tr.states]
    if tr.inputs is not None:
        cols += [f"u{i + 1}" for i in range(tr.inputs.shape[0])]
        blocks.append(tr.inputs)
    table = np.vstack(blocks).T
    with path.open("w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    if manifest:
        meta = {
            "version": VERSION_TAG,
            "label": tr.label,
            "dim": tr.dim,
            "n_u": 0 if tr.inputs is None else int(tr.inputs.shape[0]),
            "n_samples": tr.n_samples,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")
    return path


def load_trajectory(path, label: str | None = None) -> Trajectory:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "t":
        raise ValidationError(f"{path} is not a trajectory CSV (no leading t column)")
    n_u = sum(1 for c in header if c.startswith("u"))
    n_x = len(header) - 1 - n_u
    table = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    if label is None:
        side = path.with_suffix(".json")
        label = (
            json.loads(side.read_text()).get("label", "decay")
            if side.exists()
            else "decay"
        )
    return Trajectory(
        table[:, 0],
        table[:, 1 : 1 + n_x].T,
        table[:, 1 + n_x :].T if n_u else None,
        label,
    )


# ---------------------------------------------------------------------------
# training sets (directory of snapshots)
# ---------------------------------------------------------------------------


def save_training_set(training: TrainingSet, dirpath) -> Path:
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    groups = []
    for gi, g in enumerate(training.groups):
        decays, controlled = [], []
        for ti, tr in enumerate(g.decays):
            name = f"g{gi:03d}_decay{ti:03d}.csv"
            save_trajectory(tr, root / name, manifest=False)
            decays.append(name)
        for ti, tr in enumerate(g.controlled):
            name = f"g{gi:03d}_ctl{ti:03d}.csv"
            save_trajectory(tr, root / name, manifest=False)
            controlled.append(name)
        groups.append(
            {
                "u_s": g.u_s.tolist(),
                "y_s": g.y_s.tolist(),
                "split": list(g.split),
                "decays": decays,
                "controlled": controlled,
            }
        )
    meta = {
        "version": VERSION_TAG,
        "embedding": _embedding_payload(training.spec),
        "groups": groups,
    }
    (root / "training_set.json").write_text(json.dumps(meta, indent=1) + "\n")
    return root


def load_training_set(dirpath) -> TrainingSet:
    root = Path(dirpath)
    meta = json.loads((root / "training_set.json").read_text())
    spec = _embedding_from_payload(meta["embedding"])
    groups = []
    for g in meta["groups"]:
        groups.append(
            DecayGroup(
                u_s=np.array(g["u_s"], dtype=float),
                y_s=np.array(g["y_s"], dtype=float),
                decays=[load_trajectory(root / f, "decay") for f in g["decays"]],
                split=list(g["split"]),
                controlled=[
                    load_trajectory(root / f, "controlled") for f in g["controlled"]
                ],
            )
        )
    return TrainingSet(spec, groups)


# ---------------------------------------------------------------------------
# raw collection datasets (directory, CLI collect → train handoff)
# ---------------------------------------------------------------------------


def save_dataset(
    dataset: StaticDataset, dirpath, extra_meta: dict | None = None
) -> Path:
    """Write the raw per-node data: snapshot CSVs plus a full manifest.

    The manifest records every per-point failure with its static-input
    index, the collection spec, and the enrichment seed, so a later fit
    reproduces the build exactly.
    """
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    groups = []
    for gi, i in enumerate(dataset.live):
        decays, controlled = [], []
        for ti, tr in enumerate(dataset.decays[gi]):
            name = f"g{gi:03d}_decay{ti:03d}.csv"
            save_trajectory(tr, root / name, manifest=False)
            decays.append(name)
        for ti, tr in enumerate(dataset.controlled[gi]):
            name = f"g{gi:03d}_ctl{ti:03d}.csv"
            save_trajectory(tr, root / name, manifest=False)
            controlled.append(name)
        groups.append(
            {
                "node": int(i),
                "u_s": dataset.nodes[i].tolist(),
                "x_s": dataset.equilibria[i].tolist(),
                "gap_ratio": float(dataset.gaps[i]),
                "decays": decays,
                "controlled": controlled,
            }
        )
    meta = {
        "version": VERSION_TAG,
        "kind": "static_dataset",
        "seed": dataset.collection.seed,
        "collection": asdict(dataset.collection),
        "nodes": [np.asarray(u).tolist() for u in dataset.nodes],
        "origin_index": dataset.origin_index,
        "origin_is_member": dataset.origin_is_member,
        "extra_seed": dataset.extra_seed,
        "failures": dataset.failures,
        "groups": groups,
    }
    if extra_meta:
        meta.update(extra_meta)
    (root / "training_set.json").write_text(json.dumps(meta, indent=1) + "\n")
    return root


def load_dataset(dirpath) -> StaticDataset:
    root = Path(dirpath)
    meta = json.loads((root / "training_set.json").read_text())
    if meta.get("kind") != "static_dataset":
        raise ValidationError(f"{root} does not hold a raw collection dataset")
    live, equilibria, gaps, decays, controlled = [], {}, {}, [], []
    for g in meta["groups"]:
        i = int(g["node"])
        live.append(i)
        equilibria[i] = np.array(g["x_s"], dtype=float)
        gaps[i] = float(g["gap_ratio"])
        decays.append([load_trajectory(root / f, "decay") for f in g["decays"]])
        controlled.append(
            [load_trajectory(root / f, "controlled") for f in g["controlled"]]
        )
    return StaticDataset(
        nodes=[np.array(u, dtype=float) for u in meta["nodes"]],
        origin_index=int(meta["origin_index"]),
        origin_is_member=bool(meta["origin_is_member"]),
        live=live,
        equilibria=equilibria,
        gaps=gaps,
        decays=decays,
        controlled=controlled,
        failures=list(meta["failures"]),
        extra_seed=int(meta["extra_seed"]),
        collection=CollectionSpec(**meta["collection"]),
    )


# ---------------------------------------------------------------------------
# model envelopes
# ---------------------------------------------------------------------------


def _embedding_payload(spec: EmbeddingSpec) -> dict:
    return {"copies": spec.copies, "lag": spec.lag, "obs_dim": spec.obs_dim}


def _embedding_from_payload(p: dict) -> EmbeddingSpec:
    return EmbeddingSpec(
        copies=int(p["copies"]), lag=float(p["lag"]), obs_dim=int(p["obs_dim"])
    )


def _arr(p, key):
    return None if p[key] is None else np.array(p[key], dtype=float)


def _ssm_payload(m: StaticSSMModel) -> dict:
    out = {
        "d": m.d,
        "n_w": m.n_w,
        "n_r": m.n_r,
        "monomial_order": m.monomial_order,
        "y_s": m.y_s.tolist(),
        "u_s": m.u_s.tolist(),
        "V": m.V.tolist(),
        "W": m.W.tolist(),
        "R": m.R.tolist(),
        "B": None if m.B is None else m.B.tolist(),
    }
    b_res = getattr(m, "b_residual", None)
    if b_res is not None:
        out["b_residual"] = float(b_res)
    return out


def _ssm_from_payload(p: dict) -> StaticSSMModel:
    tag = p.get("monomial_order", MONOMIAL_ORDER_TAG)
    if tag != MONOMIAL_ORDER_TAG:
        raise ValidationError(
            f"coefficients use monomial order {tag!r}; this build reads "
            f"{MONOMIAL_ORDER_TAG!r}"
        )
    m = StaticSSMModel(
        y_s=_arr(p, "y_s"),
        u_s=_arr(p, "u_s"),
        V=_arr(p, "V"),
        W=_arr(p, "W"),
        R=_arr(p, "R"),
        B=_arr(p, "B"),
        d=int(p["d"]),
        n_w=int(p["n_w"]),
        n_r=int(p["n_r"]),
        monomial_order=tag,
    )
    if "b_residual" in p:
        m.b_residual = float(p["b_residual"])
    return m


def _manifold_payload(mf: CriticalManifoldMap) -> dict:
    return {
        "S_coef": mf.S_coef.tolist(),
        "I_coef": mf.I_coef.tolist(),
        "extractor": mf.extractor.tolist(),
        "n_S": mf.n_S,
        "n_I": mf.n_I,
        "round_trip_error": mf.round_trip_error,
        "s_residual": mf.s_residual,
        "i_residual": mf.i_residual,
        "X_coef": None if mf.X_coef is None else mf.X_coef.tolist(),
    }


def _manifold_from_payload(p: dict) -> CriticalManifoldMap:
    return CriticalManifoldMap(
        S_coef=_arr(p, "S_coef"),
        I_coef=_arr(p, "I_coef"),
        extractor=_arr(p, "extractor"),
        n_S=int(p["n_S"]),
        n_I=int(p["n_I"]),
        round_trip_error=float(p["round_trip_error"]),
        s_residual=float(p["s_residual"]),
        i_residual=float(p["i_residual"]),
        X_coef=_arr(p, "X_coef"),
    )


def _dictionary_payload(d: ASSMDictionary) -> dict:
    return {
        "d": d.d,
        "n_w": d.n_w,
        "n_r": d.n_r,
        "embedding": _embedding_payload(d.spec),
        "input_box": d.input_box.tolist(),
        "Q_s": d.Q_s.tolist(),
        "sampler": {"name": d.sampler, "R_ball": d.R_ball, "l": d.l, "n_q": d.n_q},
        "members": [_ssm_payload(m) for m in d.models],
        "origin_model": _ssm_payload(d.origin_model),
        "manifold": _manifold_payload(d.manifold),
        "diagnostics": d.diagnostics,
    }


def _dictionary_from_payload(p: dict) -> ASSMDictionary:
    samp = p["sampler"]
    return ASSMDictionary(
        models=[_ssm_from_payload(m) for m in p["members"]],
        Q_s=np.array(p["Q_s"], dtype=float),
        manifold=_manifold_from_payload(p["manifold"]),
        origin_model=_ssm_from_payload(p["origin_model"]),
        input_box=np.array(p["input_box"], dtype=float),
        spec=_embedding_from_payload(p["embedding"]),
        d=int(p["d"]),
        n_w=int(p["n_w"]),
        n_r=int(p["n_r"]),
        sampler=samp["name"],
        R_ball=None if samp["R_ball"] is None else float(samp["R_ball"]),
        l=float(samp["l"]),
        n_q=int(samp["n_q"]),
        diagnostics=p.get("diagnostics", {}),
    )


def _tpwl_payload(m: TPWLModel) -> dict:
    return {
        "basis": m.basis.tolist(),
        "anchors": m.anchors.tolist(),
        "anchor_inputs": m.anchor_inputs.tolist(),
        "A": m.A.tolist(),
        "B": m.B.tolist(),
        "c": m.c.tolist(),
        "threshold": m.threshold,
    }


def _tpwl_from_payload(p: dict) -> TPWLModel:
    return TPWLModel(
        basis=_arr(p, "basis"),
        anchors=_arr(p, "anchors"),
        anchor_inputs=_arr(p, "anchor_inputs"),
        A=_arr(p, "A"),
        B=_arr(p, "B"),
        c=_arr(p, "c"),
        threshold=float(p["threshold"]),
    )


def _koopman_payload(m: KoopmanPregainModel) -> dict:
    return {
        "A": m.A.tolist(),
        "B": m.B.tolist(),
        "G": m.G.tolist(),
        "K": m.K.tolist(),
        "P": m.P.tolist(),
        "Q_k": m.Q_k.tolist(),
        "R_k": m.R_k.tolist(),
        "target_map": m.target_map.tolist(),
        "care_residual": m.care_residual,
        "open_loop_stable": m.open_loop_stable,
        "embedding": None if m.embedding is None else _embedding_payload(m.embedding),
    }


def _koopman_from_payload(p: dict) -> KoopmanPregainModel:
    emb = p.get("embedding")
    return KoopmanPregainModel(
        A=_arr(p, "A"),
        B=_arr(p, "B"),
        G=_arr(p, "G"),
        K=_arr(p, "K"),
        P=_arr(p, "P"),
        Q_k=_arr(p, "Q_k"),
        R_k=_arr(p, "R_k"),
        target_map=_arr(p, "target_map"),
        care_residual=float(p["care_residual"]),
        open_loop_stable=bool(p["open_loop_stable"]),
        embedding=None if emb is None else _embedding_from_payload(emb),
    )


_PACKERS = {
    StaticSSMModel: ("static_ssm", _ssm_payload),
    ASSMDictionary: ("assm_dictionary", _dictionary_payload),
    TPWLModel: ("tpwl", _tpwl_payload),
    KoopmanPregainModel: ("koopman_pregain", _koopman_payload),
}

_UNPACKERS = {
    "static_ssm": _ssm_from_payload,
    "assm_dictionary": _dictionary_from_payload,
    "tpwl": _tpwl_from_payload,
    "koopman_pregain": _koopman_from_payload,
}


def save_model(obj, path, provenance: dict | None = None, config: dict | None = None) -> Path:
    """Write any fitted model in the shared JSON envelope, tagged by kind.

    ``provenance`` is stored verbatim (conventionally the training dataset
    hash and the collection seed); ``config`` is hashed, not stored.
    """
    for cls, (kind, pack) in _PACKERS.items():
        if isinstance(obj, cls):
            break
    else:
        raise ValidationError(f"cannot serialize a {type(obj).__name__}")
    env: dict = {"kind": kind, "version": VERSION_TAG}
    if config is not None:
        env["config_sha256"] = config_hash(config)
    if provenance:
        env["provenance"] = provenance
    env["model"] = pack(obj)
    path = Path(path)
    path.write_text(json.dumps(env, indent=1) + "\n")
    return path


def load_model(path):
    """Inverse of :func:`save_model`; dictionaries come back unbound.

    A loaded dictionary's manifold anchors are the stored polynomial maps;
    call ``manifold.bind(model, embed)`` to restore Newton-polished anchors.
    """
    env = json.loads(Path(path).read_text())
    kind = env.get("kind")
    if kind not in _UNPACKERS:
        raise ValidationError(f"unknown model kind {kind!r} in {path}")
    return _UNPACKERS[kind](env["model"])


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def save_target(track: TargetTrack, path) -> Path:
    path = Path(path)
    cols = ["t"] + [f"w{i + 1}" for i in range(track.w)]
    with path.open("w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for j in range(track.times.size):
            row = [track.times[j]] + list(track.values[:, j])
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    return path


def load_target(path) -> TargetTrack:
    table = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    return TargetTrack(table[:, 0], table[:, 1:].T)


# ---------------------------------------------------------------------------
# closed-loop results
# ---------------------------------------------------------------------------


def _plan_of_substep(n_steps: int, n_plans: int) -> Array:
    """Map each applied substep to its plan (fixed apply count, last partial)."""
    base = int(np.ceil(n_steps / n_plans)) if n_plans else 1
    idx = np.minimum(np.arange(n_steps) // max(base, 1), max(n_plans - 1, 0))
    return idx.astype(int)


def save_mpc_result(
    res: MPCResult,
    path,
    r_s: float | None = None,
    provenance: dict | None = None,
    config: dict | None = None,
) -> Path:
    """Write ``<path>`` as the substep CSV and ``<path stem>.json`` summary.

    The CSV repeats each plan's solve time and flags on the substeps it was
    applied to; the JSON summary keeps the per-plan arrays exactly.
    """
    path = Path(path)
    w = res.z.shape[0]
    n_u, n_steps = res.inputs.shape
    plan_of = _plan_of_substep(n_steps, len(res.solve_times))
    cols = (
        ["t"]
        + [f"z{i + 1}" for i in range(w)]
        + [f"g{i + 1}" for i in range(w)]
        + [f"u{i + 1}" for i in range(n_u)]
        + ["solve_time", "flags"]
    )
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for j in range(res.times.size):
            row = [format(res.times[j], ".17g")]
            row += [format(v, ".17g") for v in res.z[:, j]]
            row += [format(v, ".17g") for v in res.gamma[:, j]]
            if j < n_steps:
                p = int(plan_of[j])
                row += [format(v, ".17g") for v in res.inputs[:, j]]
                row.append(format(res.solve_times[p], ".17g"))
                row.append(json.dumps(res.flags[p], sort_keys=True))
            else:  # terminal sample: state only
                row += [""] * (n_u + 2)
            writer.writerow(row)
    summary: dict = {"version": VERSION_TAG}
    if config is not None:
        summary["config_sha256"] = config_hash(config)
    if provenance:
        summary["provenance"] = provenance
    summary.update(
        {
            "label": res.label,
            "ise": res.metrics.get("ise"),
            "violation_ratio": res.metrics.get("violation_ratio"),
            "max_violation": res.metrics.get("max_violation"),
            "r_s": r_s,
            "mean_solve_time": float(np.mean(res.solve_times)),
            "solve_times": np.asarray(res.solve_times, dtype=float).tolist(),
            "scp_iterations": np.asarray(res.scp_iterations, dtype=int).tolist(),
            "flags": list(res.flags),
        }
    )
    path.with_suffix(".json").write_text(json.dumps(summary, indent=1) + "\n")
    return path


def load_mpc_result(path) -> MPCResult:
    path = Path(path)
    summary = json.loads(path.with_suffix(".json").read_text())
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    w = sum(1 for c in header if c.startswith("z"))
    n_u = sum(1 for c in header if c.startswith("u"))
    times = np.array([float(r[0]) for r in body])
    z = np.array([[float(v) for v in r[1 : 1 + w]] for r in body]).T
    gamma = np.array([[float(v) for v in r[1 + w : 1 + 2 * w]] for r in body]).T
    inputs = np.array(
        [[float(v) for v in r[1 + 2 * w : 1 + 2 * w + n_u]] for r in body if r[-1] != ""]
    ).T
    metrics = {
        k: summary[k]
        for k in ("ise", "violation_ratio", "max_violation")
        if summary.get(k) is not None
    }
    return MPCResult(
        label=summary["label"],
        times=times,
        z=z,
        gamma=gamma,
        inputs=inputs if inputs.size else np.zeros((n_u, 0)),
        solve_times=np.array(summary["solve_times"], dtype=float),
        scp_iterations=np.array(summary["scp_iterations"], dtype=int),
        flags=list(summary["flags"]),
        metrics=metrics,
    )
