"""Two-level min-gate: ECDF p-values, within-encoder min, re-CDF correction,
cross-encoder min, and quantile thresholding.

Offline calibration mirrors the online path exactly: the same validation
arrays build the per-fork ECDFs, the Level-1 ECDFs, and the threshold tau.
All ECDF evaluations use add-one smoothing (count+1)/(N+2) so p-values never
touch 0 or 1; tau uses the lower-interpolation empirical quantile.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ValidationError

CAL1_MAGIC = b"CAL1"
CAL1_VERSION = 1


@dataclass(frozen=True)
class EcdfTable:
    """Sorted reference scores supporting smoothed ECDF evaluation."""

    sorted_scores: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.sorted_scores, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValidationError("EcdfTable needs at least 2 reference scores")
        if np.any(np.diff(arr) < 0):
            raise ValidationError("reference scores must be sorted ascending")
        object.__setattr__(self, "sorted_scores", arr)

    @property
    def count(self) -> int:
        return self.sorted_scores.size

    def eval(self, x):
        """Smoothed ECDF (#(ref <= x) + 1) / (N + 2); ties count as <=."""
        c = np.searchsorted(self.sorted_scores, x, side="right")
        return (c + 1.0) / (self.count + 2.0)


def ecdf_eval(tab: EcdfTable, x):
    return tab.eval(x)


def level1_min(r_n, r_u):
    """Within-encoder minimum of the two fork p-values."""
    return np.minimum(r_n, r_u)


def quantile_lower(sorted_values: np.ndarray, q: float) -> float:
    """Lower-interpolation empirical quantile of an ascending array."""
    idx = int(np.floor(q * (len(sorted_values) - 1)))
    return float(sorted_values[idx])


def _q32(x):
    """Quantize to float32 resolution (the CAL1 interchange precision), so a
    reloaded calibration reproduces in-memory results bit for bit."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class CalibrationBundle:
    """Everything the offline calibration phase produces."""

    encoders: list[str]
    forks: dict  # encoder -> list of fork tags
    fork_ecdfs: dict  # (encoder, fork) -> EcdfTable
    level1_ecdfs: dict  # encoder -> EcdfTable
    alpha: float
    tau: float
    s_val: np.ndarray  # sorted combined ID-validation scores

    def pit(self, s):
        """Map combined scores through the stored ID-validation score ECDF.

        The probability-integral transform of s; on fresh ID data this is
        approximately uniform, which is what makes threshold adjustment
        recalibration-free.
        """
        return EcdfTable(self.s_val).eval(s)


def _level2(bundle_forks, fork_ecdfs, level1_ecdfs, encoders, lls):
    n = None
    e_hat = []
    for enc in encoders:
        rs = []
        for fork in bundle_forks[enc]:
            key = (enc, fork)
            if key not in lls:
                raise ValidationError(f"missing fork key {key!r}")
            arr = _q32(lls[key])
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise ValidationError("log-likelihood arrays have mismatched lengths")
            rs.append(fork_ecdfs[key].eval(arr))
        e_k = _q32(np.min(np.stack(rs), axis=0))
        e_hat.append(_q32(level1_ecdfs[enc].eval(e_k)))
    return np.stack(e_hat)  # (K, n)


def calibrate(val_lls: dict, alpha: float) -> CalibrationBundle:
    """Algorithm's offline phase over {(encoder, fork) -> ID-validation nats}."""
    if not 0 < alpha <= 0.5:
        raise ValidationError("alpha must lie in (0, 0.5]")
    if not val_lls:
        raise ValidationError("no log-likelihood arrays given")
    encoders, forks = [], {}
    for enc, fork in val_lls:
        if enc not in forks:
            encoders.append(enc)
            forks[enc] = []
        forks[enc].append(fork)
    lengths = {np.asarray(a).size for a in val_lls.values()}
    if len(lengths) != 1:
        raise ValidationError("log-likelihood arrays have mismatched lengths")
    n = lengths.pop()
    if n < 20:
        raise ValidationError(f"need at least 20 validation samples, got {n}")

    fork_ecdfs = {
        key: EcdfTable(np.sort(_q32(arr)))
        for key, arr in val_lls.items()
    }
    # Level-1 ECDFs come from the validation e_k values themselves.
    level1_ecdfs = {}
    for enc in encoders:
        rs = [fork_ecdfs[(enc, fork)].eval(_q32(val_lls[(enc, fork)]))
              for fork in forks[enc]]
        e_k = _q32(np.min(np.stack(rs), axis=0))
        level1_ecdfs[enc] = EcdfTable(np.sort(e_k))

    e_hat = _level2(forks, fork_ecdfs, level1_ecdfs, encoders, val_lls)
    s = np.min(e_hat, axis=0)
    s_val = np.sort(s)
    tau = quantile_lower(s_val, alpha)
    return CalibrationBundle(
        encoders=encoders, forks=forks, fork_ecdfs=fork_ecdfs,
        level1_ecdfs=level1_ecdfs, alpha=alpha, tau=tau, s_val=s_val,
    )


@dataclass
class DetectionReport:
    encoders: list[str]
    s: np.ndarray
    is_ood: np.ndarray
    argmin_idx: np.ndarray
    e_hat: np.ndarray  # (n, K)
    tau: float

    @property
    def argmin_encoder(self):
        return [self.encoders[i] for i in self.argmin_idx]


def detect(bundle: CalibrationBundle, test_lls: dict) -> DetectionReport:
    """Online phase: p-values, two min levels, threshold decision, and the
    arg-min encoder attribution (ties go to the lowest encoder index)."""
    e_hat = _level2(bundle.forks, bundle.fork_ecdfs, bundle.level1_ecdfs,
                    bundle.encoders, test_lls)
    s = np.min(e_hat, axis=0)
    argmin_idx = np.argmin(e_hat, axis=0)  # first occurrence = lowest index
    return DetectionReport(
        encoders=list(bundle.encoders), s=s, is_ood=s < bundle.tau,
        argmin_idx=argmin_idx, e_hat=e_hat.T, tau=bundle.tau,
    )


def adjust_threshold(bundle: CalibrationBundle, alpha_new: float) -> CalibrationBundle:
    """Re-read tau from the stored ID-validation score CDF; no recalibration."""
    if not 0 < alpha_new <= 0.5:
        raise ValidationError("alpha must lie in (0, 0.5]")
    return replace(bundle, alpha=alpha_new,
                   tau=quantile_lower(bundle.s_val, alpha_new))


def min_gate_power_check(U: dict, tau: float) -> dict:
    """Empirical check of the min-gate power inequality
    P(min_k U_k < tau) >= max_k P(U_k < tau); holds for every dataset."""
    names = list(U)
    arrays = [np.asarray(U[k], dtype=np.float64) for k in names]
    if len({a.size for a in arrays}) != 1:
        raise ValidationError("arrays have mismatched lengths")
    stacked = np.stack(arrays)
    p_gate = float(np.mean(np.min(stacked, axis=0) < tau))
    p_each = {k: float(np.mean(a < tau)) for k, a in zip(names, arrays)}
    return {
        "tau": tau,
        "p_gate": p_gate,
        "p_each": p_each,
        "ok": p_gate >= max(p_each.values()),
    }


# ---------------------------------------------------------------------------
# CAL1 serialization and CSV report
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _pack_arr(a: np.ndarray) -> bytes:
    a32 = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack("<Q", a32.size) + a32.tobytes()


class _Reader:
    def __init__(self, raw):
        self.raw, self.off = raw, 0

    def take(self, fmt):
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def take_str(self):
        (ln,) = self.take("<H")
        s = self.raw[self.off:self.off + ln].decode()
        self.off += ln
        return s

    def take_arr(self):
        (cnt,) = self.take("<Q")
        if self.off + 4 * cnt > len(self.raw):
            raise FormatError("truncated CAL1 payload")
        a = np.frombuffer(self.raw, dtype="<f4", count=cnt, offset=self.off)
        self.off += 4 * cnt
        return a.astype(np.float64)


def save_bundle(bundle: CalibrationBundle, path) -> None:
    chunks = [CAL1_MAGIC, struct.pack("<B3x", CAL1_VERSION),
              struct.pack("<dd", bundle.alpha, bundle.tau),
              struct.pack("<I", len(bundle.encoders))]
    for enc in bundle.encoders:
        chunks.append(_pack_str(enc))
        chunks.append(struct.pack("<I", len(bundle.forks[enc])))
        for fork in bundle.forks[enc]:
            chunks.append(_pack_str(fork))
            chunks.append(_pack_arr(bundle.fork_ecdfs[(enc, fork)].sorted_scores))
    for enc in bundle.encoders:
        chunks.append(_pack_arr(bundle.level1_ecdfs[enc].sorted_scores))
    chunks.append(_pack_arr(bundle.s_val))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_bundle(path) -> CalibrationBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != CAL1_MAGIC:
        raise FormatError(f"{path}: not a CAL1 calibration file")
    rd = _Reader(raw)
    rd.take("<4s")
    (version,) = rd.take("<B3x")
    if version != CAL1_VERSION:
        raise FormatError(f"{path}: unsupported CAL1 version {version}")
    alpha, tau = rd.take("<dd")
    (n_enc,) = rd.take("<I")
    encoders, forks, fork_ecdfs = [], {}, {}
    for _ in range(n_enc):
        enc = rd.take_str()
        encoders.append(enc)
        (n_forks,) = rd.take("<I")
        forks[enc] = []
        for _ in range(n_forks):
            fork = rd.take_str()
            forks[enc].append(fork)
            fork_ecdfs[(enc, fork)] = EcdfTable(rd.take_arr())
    level1_ecdfs = {enc: EcdfTable(rd.take_arr()) for enc in encoders}
    s_val = rd.take_arr()
    if rd.off != len(raw):
        raise FormatError(f"{path}: trailing bytes in CAL1 file")
    return CalibrationBundle(encoders=encoders, forks=forks,
                             fork_ecdfs=fork_ecdfs, level1_ecdfs=level1_ecdfs,
                             alpha=alpha, tau=tau, s_val=s_val)


def bundle_to_json(bundle: CalibrationBundle) -> str:
    return json.dumps(
        {
            "alpha": bundle.alpha,
            "tau": bundle.tau,
            "encoders": bundle.encoders,
            "forks": bundle.forks,
            "fork_ecdfs": {
                f"{enc}:{fork}": bundle.fork_ecdfs[(enc, fork)].sorted_scores.tolist()
                for enc in bundle.encoders for fork in bundle.forks[enc]
            },
            "level1_ecdfs": {
                enc: bundle.level1_ecdfs[enc].sorted_scores.tolist()
                for enc in bundle.encoders
            },
            "s_val": bundle.s_val.tolist(),
        },
        indent=2,
    )


def write_detect_csv(report: DetectionReport, path) -> None:
    cols = ",".join(f"ehat_{enc}" for enc in report.encoders)
    with open(path, "w") as fh:
        fh.write(f"sample_index,s,is_ood,argmin_encoder,{cols}\n")
        for i in range(report.s.size):
            eh = ",".join(f"{v:.10g}" for v in report.e_hat[i])
            fh.write(f"{i},{report.s[i]:.10g},{int(report.is_ood[i])},"
                     f"{report.encoders[report.argmin_idx[i]]},{eh}\n")
