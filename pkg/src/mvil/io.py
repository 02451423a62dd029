"""File formats: versioned map file, measurement log, truth table, flat config.

Interchange files (map, measurements, truth) are written at full double
precision so replaying them reproduces in-memory runs; report CSVs emitted by
the harness use 9 significant digits.  All formats are line-oriented text with
a magic+version header.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .map_update import LandmarkMatch, MapMatch
from .propagation import ImuSample

MAP_MAGIC = "# MVIL-MAP v1"
LOG_MAGIC = "# MVIL-LOG v1"
TRUTH_MAGIC = "# MVIL-TRUTH v1"


class FormatError(Exception):
    pass


def _f(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class PriorMap:
    """Keyframe poses with covariance plus anchored landmark estimates."""

    keyframes: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    landmarks: list = field(default_factory=list)   # (lid, anchor_id, p_anchor, [(kf_id, uv)])

    @staticmethod
    def from_world(world) -> "PriorMap":
        pm = PriorMap()
        for kf in world.keyframes:
            pm.keyframes[kf.kf_id] = (kf.q.copy(), kf.p.copy(), kf.cov.copy())
        for lm in world.map_landmarks:
            pm.landmarks.append((lm.landmark_id, lm.anchor_id, lm.p_anchor.copy(),
                                 [(k, uv.copy()) for k, uv in lm.observations]))
        return pm

    def keyframe_pose(self, kf_id: int) -> tuple[np.ndarray, np.ndarray]:
        q, p, _ = self.keyframes[kf_id]
        return q, p

    def keyframe_cov(self, kf_id: int) -> np.ndarray:
        return self.keyframes[kf_id][2]


def write_map(path: str | Path, pm: PriorMap) -> None:
    iu = np.triu_indices(6)
    with open(path, "w") as fh:
        fh.write(MAP_MAGIC + "\n")
        for kf_id in sorted(pm.keyframes):
            q, p, cov = pm.keyframes[kf_id]
            vals = [_f(v) for v in (*q, *p, *cov[iu])]
            fh.write(f"KF,{kf_id}," + ",".join(vals) + "\n")
        for lid, anchor, pa, obs in pm.landmarks:
            parts = [f"LM,{lid},{anchor}", _f(pa[0]), _f(pa[1]), _f(pa[2])]
            for kf_id, uv in obs:
                parts.extend([str(kf_id), _f(uv[0]), _f(uv[1])])
            fh.write(",".join(parts) + "\n")


def load_map(path: str | Path) -> PriorMap:
    pm = PriorMap()
    iu = np.triu_indices(6)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != MAP_MAGIC:
            raise FormatError(f"bad map header {header!r}, expected {MAP_MAGIC!r}")
        for line in fh:
            tok = line.strip().split(",")
            if not tok or not tok[0]:
                continue
            if tok[0] == "KF":
                kf_id = int(tok[1])
                vals = np.array([float(x) for x in tok[2:]])
                q, p = vals[0:4], vals[4:7]
                cov = np.zeros((6, 6))
                cov[iu] = vals[7:28]
                cov = cov + np.triu(cov, 1).T
                pm.keyframes[kf_id] = (q, p, cov)
            elif tok[0] == "LM":
                lid, anchor = int(tok[1]), int(tok[2])
                pa = np.array([float(tok[3]), float(tok[4]), float(tok[5])])
                rest = tok[6:]
                obs = []
                for i in range(0, len(rest), 3):
                    obs.append((int(rest[i]), np.array([float(rest[i + 1]), float(rest[i + 2])])))
                pm.landmarks.append((lid, anchor, pa, obs))
            else:
                raise FormatError(f"unknown map record {tok[0]!r}")
    return pm


def write_measurements(path: str | Path, imu: list[ImuSample], frames) -> None:
    """Time-ordered single-pass log with IMU / TRACK / MATCH records."""
    events = [(s.timestamp, 0, ("IMU", s)) for s in imu]
    for fr in frames:
        events.append((fr.timestamp, 1, ("FRAME", fr)))
    events.sort(key=lambda e: (e[0], e[1]))
    with open(path, "w") as fh:
        fh.write(LOG_MAGIC + "\n")
        for t, _, (kind, obj) in events:
            if kind == "IMU":
                fh.write(f"IMU,{_f(t)},{','.join(_f(v) for v in (*obj.omega, *obj.accel))}\n")
            else:
                for fid, uv, sig in obj.tracks:
                    fh.write(f"TRACK,{_f(t)},{fid},{_f(uv[0])},{_f(uv[1])},{_f(sig)}\n")
                m = obj.match
                if m is not None:
                    for lm in m.landmarks:
                        parts = [f"MATCH,{_f(t)},{lm.landmark_id},{lm.anchor_id}",
                                 _f(lm.uv_current[0]), _f(lm.uv_current[1]),
                                 _f(lm.uv_anchor[0]), _f(lm.uv_anchor[1]),
                                 _f(m.sigma_current), _f(m.sigma_map)]
                        for kid, uv in lm.co_observations:
                            parts.extend([str(kid), _f(uv[0]), _f(uv[1])])
                        fh.write(",".join(parts) + "\n")


def load_measurements(path: str | Path):
    """Replay the log into (imu samples, camera frames).

    A camera frame exists at every timestamp that carries TRACK or MATCH rows.
    """
    from .sim import CameraFrame

    imu: list[ImuSample] = []
    frames: dict[float, CameraFrame] = {}

    def frame_at(t: float) -> CameraFrame:
        if t not in frames:
            frames[t] = CameraFrame(t, [], None)
        return frames[t]

    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_MAGIC:
            raise FormatError(f"bad log header {header!r}, expected {LOG_MAGIC!r}")
        for line in fh:
            tok = line.strip().split(",")
            if not tok or not tok[0]:
                continue
            t = float(tok[1])
            if tok[0] == "IMU":
                v = [float(x) for x in tok[2:8]]
                imu.append(ImuSample(t, np.array(v[0:3]), np.array(v[3:6])))
            elif tok[0] == "TRACK":
                fr = frame_at(t)
                fr.tracks.append((int(tok[2]), np.array([float(tok[3]), float(tok[4])]),
                                  float(tok[5])))
            elif tok[0] == "MATCH":
                fr = frame_at(t)
                lid, anchor = int(tok[2]), int(tok[3])
                uv_cur = np.array([float(tok[4]), float(tok[5])])
                uv_anc = np.array([float(tok[6]), float(tok[7])])
                sig_cur, sig_map = float(tok[8]), float(tok[9])
                rest = tok[10:]
                co = []
                for i in range(0, len(rest), 3):
                    co.append((int(rest[i]), np.array([float(rest[i + 1]), float(rest[i + 2])])))
                if fr.match is None:
                    fr.match = MapMatch(t, [], sig_cur, sig_map)
                fr.match.landmarks.append(LandmarkMatch(lid, anchor, np.zeros(3), uv_cur, uv_anc, co))
            else:
                raise FormatError(f"unknown log record {tok[0]!r}")
    ordered = [frames[t] for t in sorted(frames)]
    return imu, ordered


def attach_landmark_positions(frames, pm: PriorMap) -> None:
    """Fill LandmarkMatch.f_anchor from the map file after loading a log."""
    lm_pos = {lid: pa for lid, _, pa, _ in pm.landmarks}
    for fr in frames:
        if fr.match is not None:
            for lm in fr.match.landmarks:
                lm.f_anchor = lm_pos[lm.landmark_id].copy()


def write_truth(path: str | Path, rows: list[tuple], transform_rotvec, transform_t) -> None:
    """Camera-rate ground truth: t, q_IL, p, v, plus the true map transform."""
    with open(path, "w") as fh:
        fh.write(TRUTH_MAGIC + "\n")
        fh.write("# T_GL," + ",".join(_f(v) for v in (*transform_rotvec, *transform_t)) + "\n")
        for t, q, p, v in rows:
            fh.write(f"{_f(t)}," + ",".join(_f(x) for x in (*q, *p, *v)) + "\n")


def load_truth(path: str | Path):
    rows = []
    rotvec = np.zeros(3)
    trans = np.zeros(3)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TRUTH_MAGIC:
            raise FormatError(f"bad truth header {header!r}")
        for line in fh:
            if line.startswith("# T_GL,"):
                vals = [float(x) for x in line.strip().split(",")[1:]]
                rotvec = np.array(vals[0:3])
                trans = np.array(vals[3:6])
                continue
            tok = [float(x) for x in line.strip().split(",")]
            rows.append((tok[0], np.array(tok[1:5]), np.array(tok[5:8]), np.array(tok[8:11])))
    return rows, rotvec, trans


# ---------------------------------------------------------------------------
# Flat config files
# ---------------------------------------------------------------------------

def write_config(path: str | Path, values: dict) -> None:
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {_format_value(values[k])}\n")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _f(v)
    if isinstance(v, (list, tuple)):
        return ";".join(f"{a}:{b}" for a, b in v)
    return str(v)


def parse_value(s: str):
    s = s.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    if ";" in s or ":" in s:
        pairs = []
        for part in s.split(";"):
            if not part:
                continue
            a, b = part.split(":")
            pairs.append((float(a), float(b)))
        return pairs
    try:
        iv = int(s)
        return iv
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def load_config(path: str | Path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"bad config line {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = parse_value(v)
    return out
