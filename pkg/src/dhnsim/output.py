"""CSV/JSON serialisation of trajectory records and setpoint-tracking metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .controllers import FLOW_PUMP_MODES, PRESSURE_MODES, VALVE_MODES, Mode
from .passivity import eip_certificate, lyapunov_audit

UNITS = {"q": "m3/s", "q_P": "m3/s", "p_P": "Pa", "p": "Pa", "r_v": "-"}

# channel sets of the published figures
FIGURE_PRESSURES = ["E1", "E2", "E7", "E15", "N4"]
FIGURE_FLOWS = ["E2", "E3", "E4", "E5", "E6", "E7", "E8", "E25"]


def state_unit(key: str, mode: Mode, name: str) -> str:
    if name == "r":
        return "Pa" if mode in FLOW_PUMP_MODES else "m3/s"
    return UNITS[name]


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def columns(rec) -> list[tuple[str, str, str]]:
    """``(subsystem key, channel, unit)`` in first-appearance order."""
    seen, out = set(), []
    for seg in rec.segments:
        asm = seg.asm
        for lp in asm.loops:
            for nm in lp.names:
                c = (lp.key, nm, state_unit(lp.key, lp.mode, nm))
                if c[:2] not in seen:
                    seen.add(c[:2])
                    out.append(c)
    return out


def _derived(rec, seg):
    """Per-sample channels beyond the raw state: ports, inputs, storage, dissipation."""
    asm = seg.asm
    out: dict[tuple[str, str], np.ndarray] = {}
    nE = asm.n_edges
    for i, lp in enumerate(asm.loops):
        edge = i < nE
        out[(lp.key, "z")] = seg.Z[:, i]
        out[(lp.key, "d")] = seg.D[:, i]
        out[(lp.key, "H")] = seg.H[:, i]
        out[(lp.key, "psi")] = seg.psi[:, i]
        sl = asm.layout.slices[lp.key]
        X = seg.X[:, sl]
        if edge and lp.mode in VALVE_MODES:
            u = seg.UV[:, i]
            out[(lp.key, "u_v")] = u
            with np.errstate(invalid="ignore", divide="ignore"):
                s = np.clip(u, 1.0, lp.valve.u_max)
                if lp.valve.characteristic.value == "linear":
                    stem = 1.0 / np.sqrt(s)
                else:
                    stem = 1.0 - np.log(np.sqrt(s)) / np.log(lp.valve.rangeability)
            out[(lp.key, "s_v")] = stem
        ps = rec.setpoint(lp.key, "p_set", seg.t, seg)
        if lp.pump is not None and (lp.mode in PRESSURE_MODES or lp.mode in FLOW_PUMP_MODES):
            if lp.mode is Mode.HOLDING:
                qP, pP, r = X[:, 0], X[:, 1], X[:, 2]
            else:
                qP, pP, r = X[:, 1], X[:, 2], X[:, 3]
            if lp.mode in PRESSURE_MODES:
                Rp = lp.pressure_ctl.gain(lp.pump)
                u = (lp.pump.R_P - Rp) * qP - Rp * r + lp.pump.J_P / lp.pressure_ctl.Q_I * (ps - pP)
            else:
                u = -lp.flow_ctl.K_P * pP - r
            out[(lp.key, "u_P")] = u
    for k, nid in enumerate(asm.partition.junctions):
        out[(f"N{nid}", "p")] = seg.ZK[:, k]
    out[("net", "power")] = seg.PW[:, 0]
    out[("net", "power_shifted")] = seg.PW[:, 2]
    out[("net", "manifold")] = seg.PW[:, 4]
    return out


DERIVED_UNITS = {"u_v": "-", "s_v": "-", "u_P": "Pa", "H": "J", "psi": "W", "power": "W",
                 "power_shifted": "W", "manifold": "m3/s"}


def _port_units(key: str, ch: str) -> str:
    edge = key.startswith("E")
    if ch == "z":
        return "m3/s" if edge else "Pa"
    return "Pa" if edge else "m3/s"


def write_csv(rec, path, channels: str = "all") -> list[str]:
    """One row per sample; header ``time_s`` then ``<subsystem>.<channel>[unit]``."""
    cols = columns(rec)
    derived = [_derived(rec, seg) if seg.H is not None else {} for seg in rec.segments]
    extra = []
    seen = set()
    for d in derived:
        for k in d:
            if k not in seen:
                seen.add(k)
                extra.append(k)
    fig_p = [k for k in FIGURE_PRESSURES if k in controlled(rec, "p_set")]
    fig_q = [k for k in FIGURE_FLOWS if k in controlled(rec, "q_set")]
    if channels == "figures":
        keep = set(fig_p) | set(fig_q)
        cols = [c for c in cols if c[0] in keep and c[1] in ("q", "p_P")]
        extra = []
    header = ["time_s"] + [f"{k}.{n}[{u}]" for k, n, u in cols]
    for k, ch in extra:
        unit = _port_units(k, ch) if ch in ("z", "d") else ("Pa" if ch == "p" else DERIVED_UNITS[ch])
        header.append(f"{k}.{ch}[{unit}]")
    if channels == "figures":
        for key in fig_p:
            header.append(f"{key}.p_P_dev[-]")
        for key in fig_q:
            header.append(f"{key}.q_dev[-]")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        if rec.scenario.t_end == 0:
            return header
        for si, seg in enumerate(rec.segments):
            idx = {n: j for j, n in enumerate(seg.names)}
            der = derived[si] if channels != "figures" else {}
            devs = []
            if channels == "figures":
                for key in fig_p:
                    devs.append(_dev(rec, seg, key, "p_P", "p_set"))
                for key in fig_q:
                    devs.append(_dev(rec, seg, key, "q", "q_set"))
            for r in range(seg.t.size):
                row = [_fmt(seg.t[r])]
                for k, n, _ in cols:
                    j = idx.get(f"{k}.{n}")
                    row.append(_fmt(seg.X[r, j]) if j is not None else "nan")
                for key in extra:
                    row.append(_fmt(der[key][r]) if key in der else "nan")
                for dv in devs:
                    row.append(_fmt(dv[r]))
                w.writerow(row)
    return header


def _dev(rec, seg, key, ch, fld) -> np.ndarray:
    name = f"{key}.{ch}"
    if not seg.has(name):
        return np.full(seg.t.size, np.nan)
    ref = rec.setpoint(key, fld, seg.t, seg)
    return (seg.column(name) - ref) / np.abs(ref)


# -- tracking metrics ------------------------------------------------------------------


@dataclass
class Tracking:
    key: str
    channel: str
    t: np.ndarray
    rel: np.ndarray  # relative deviation from the setpoint, NaN while inactive
    seg0: np.ndarray  # start time of the segment each sample belongs to


def tracking(rec, key: str, channel: str) -> Tracking:
    fld = "p_set" if channel == "p_P" else "q_set"
    t, v = rec.channel(f"{key}.{channel}")
    ref = rec.reference(key, fld)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = (v - ref) / np.abs(ref)
    seg0 = np.concatenate([np.full(s.t.size, s.t0) for s in rec.segments]) if rec.segments else np.zeros(0)
    return Tracking(key, channel, t, rel, seg0)


def window(tr: Tracking, t0: float, t1: float, closed: bool = False):
    """Samples of the segments starting in ``[t0, t1)``, clipped to ``t < t1`` unless ``closed``."""
    m = (tr.seg0 >= t0) & (tr.seg0 < t1) & (tr.t >= t0) & ((tr.t <= t1) if closed else (tr.t < t1))
    return tr.t[m], tr.rel[m]


def max_deviation(tr: Tracking, t0: float, t1: float) -> float:
    _, r = window(tr, t0, t1, closed=True)
    r = r[np.isfinite(r)]
    return float(np.max(np.abs(r))) if r.size else math.nan


def settling_time(tr: Tracking, t0: float, t1: float, band: float) -> float:
    """Time after ``t0`` from which the deviation stays inside ``band`` up to ``t1``."""
    t, r = window(tr, t0, t1, closed=True)
    ok = np.isfinite(r)
    t, r = t[ok], r[ok]
    if not t.size:
        return math.nan
    out = np.flatnonzero(np.abs(r) > band)
    if not out.size:
        return 0.0
    if out[-1] == t.size - 1:
        return math.inf
    return float(t[out[-1] + 1] - t0)


def event_windows(rec, times=None) -> list[tuple[float, float]]:
    ends = sorted({e.time for e in rec.scenario.events if e.time > 0} | {rec.scenario.t_end})
    times = times or [t for t in ends if t < rec.scenario.t_end]
    out = []
    for te in times:
        nxt = min([t for t in ends if t > te], default=rec.scenario.t_end)
        out.append((te, nxt))
    return out


def summary(rec, eps_rel: float = 1e-9) -> dict:
    """JSON-ready run summary: final errors, per-event tracking, diagnostics."""
    cert = eip_certificate(rec, eps_rel)
    audit = lyapunov_audit(rec, eps_rel)
    pw = np.vstack([s.PW for s in rec.segments if s.PW is not None]) if rec.segments else np.zeros((0, 5))
    rel = np.abs(pw[:, 0]) / np.maximum(pw[:, 1], 1e-300) if pw.size else np.zeros(0)
    rels = np.abs(pw[:, 2]) / np.maximum(pw[:, 3], 1e-300) if pw.size else np.zeros(0)
    out = {
        "scenario": rec.scenario.name,
        "status": rec.status,
        "message": rec.message,
        "runtime_s": rec.runtime,
        "t_end": float(rec.t[-1]) if rec.t.size else 0.0,
        "events": rec.log,
        "segments": [
            {"t0": s.t0, "t1": s.t1, "substeps": s.substeps, "max_substeps": s.max_substeps,
             "refined_steps": s.refinements, "projections": s.projections,
             "max_power_ratio_eval": s.power_eval,
             "equilibrium_residual": s.eq.residual,
             "endpoint_error": endpoint_error(s)}
            for s in rec.segments
        ],
        "max_manifold_residual": float(pw[:, 4].max()) if pw.size else 0.0,
        "max_power_residual_rel": float(rel.max()) if rel.size else 0.0,
        "max_power_residual_rel_eval": max((s.power_eval for s in rec.segments), default=0.0),
        "max_shifted_power_residual_rel": float(rels.max()) if rels.size else 0.0,
        "certificate": {
            "ok": cert.ok,
            "violations": len(cert.violations()),
            "worst": None if cert.worst is None else cert.worst.__dict__,
        },
        "lyapunov_violations": len(audit),
        "final_errors": final_errors(rec),
        "tracking": tracking_report(rec),
        "saturation_hits": saturation_hits(rec),
    }
    return _clean(out)


def endpoint_error(seg) -> float:
    if seg.t.size == 0:
        return math.nan
    x, xb = seg.X[-1], seg.eq.x
    return float(np.max(np.abs(x - xb) / seg.asm.state_scale(xb)))


def final_errors(rec) -> dict[str, float]:
    out = {}
    seg = rec.segments[-1] if rec.segments else None
    if seg is None:
        return out
    if not seg.t.size:
        return out
    for lp in seg.asm.loops:
        ps = rec.schedule.value(lp.key, "p_set", seg.t[-1])
        qs = rec.schedule.value(lp.key, "q_set", seg.t[-1])
        x = seg.X[-1, seg.asm.layout.slices[lp.key]]
        if qs == qs:
            out[f"{lp.key}.q"] = float((x[0] - qs) / abs(qs))
        if ps == ps:
            p = x[1] if lp.mode is Mode.HOLDING else x[2]
            out[f"{lp.key}.p_P"] = float((p - ps) / abs(ps))
    return out


def _natural(key: str):
    return (key[0] != "E", int(key[1:]))


def controlled(rec, fld: str) -> list[str]:
    """Subsystems with a setpoint on ``fld`` at some point of the run, edges first."""
    keys = {k for (k, f), tr in rec.schedule.tracks.items() if f == fld and any(v == v for v in tr.v)}
    return sorted(keys, key=_natural)


def tracking_report(rec) -> list[dict]:
    rows = []
    pressures = controlled(rec, "p_set")
    flows = controlled(rec, "q_set")
    for te, tn in event_windows(rec):
        for keys, ch, band, label in ((pressures, "p_P", 0.004, "settle_0.4pct_s"),
                                      (flows, "q", 0.03, "settle_3pct_s")):
            for key in keys:
                tr = tracking(rec, key, ch)
                dev = max_deviation(tr, te, tn)
                if dev != dev:  # inactive throughout the window
                    continue
                rows.append({"event": te, "until": tn, "channel": f"{key}.{ch}", "max_dev": dev,
                             label: settling_time(tr, te, tn, band)})
    return rows


def saturation_hits(rec) -> dict[str, int]:
    hits: dict[str, int] = {}
    for seg in rec.segments:
        asm = seg.asm
        if not asm.saturation or seg.UV is None:
            continue
        for i, lp in enumerate(asm.loops[: asm.n_edges]):
            if lp.mode in VALVE_MODES:
                u = seg.UV[:, i]
                n = int(np.sum((u <= 1.0) | (u >= lp.valve.u_max)))
                if n:
                    hits[lp.key] = hits.get(lp.key, 0) + n
    return hits


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return None if not math.isfinite(v) else v
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=False)
