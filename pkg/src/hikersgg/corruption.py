"""Seeded procedural image corruptions at five severity levels.

Every procedure works in float64 on [0, 255] and is quantized once at the end
with round-half-away-from-zero, so a given (image, type, severity, seed) always
produces the same bytes. The natural corruptions (sun glare, water drops,
smoke, rain, dust) are original procedures written for this package.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import Rng, round_half_away

log = logging.getLogger(__name__)

IMPLEMENTED = ("gaus", "shot", "imp", "dfcs", "fg", "brt", "cnt", "px", "sun", "wtd", "smk", "rain", "dust")
UNIMPLEMENTED = {
    "gls": "glass blur", "mtn": "motion blur", "zm": "zoom blur", "snw": "snow", "frst": "frost",
    "els": "elastic transform", "jpg": "JPEG compression",
}
NAMES = {
    "gaus": "gaussian noise", "shot": "shot noise", "imp": "impulse noise", "dfcs": "defocus blur",
    "fg": "fog", "brt": "brightness", "cnt": "contrast", "px": "pixelate", "sun": "sun glare",
    "wtd": "water drop", "smk": "wildfire smoke", "rain": "rain", "dust": "dust",
}
# severity 0 is the identity calibration point for these two
CALIBRATED = ("brt", "cnt")
MONOTONE = ("gaus", "shot", "imp", "brt", "cnt", "fg", "smk", "dust")

PARAMS = {
    "gaus": (8, 16, 24, 36, 48),
    "shot": (60, 25, 12, 5, 3),
    "imp": (0.01, 0.02, 0.04, 0.07, 0.10),
    "brt": (1.0, 1.1, 1.2, 1.35, 1.5, 1.7),
    "cnt": (1.0, 0.75, 0.6, 0.45, 0.3, 0.2),
    "px": (2, 3, 4, 6, 8),
    "dfcs": (1, 2, 3, 5, 7),
    "fg": (0.15, 0.3, 0.45, 0.6, 0.75),
    "sun": ((0.3, 60), (0.4, 100), (0.5, 140), (0.6, 180), (0.7, 220)),
    "wtd": ((2, 0.08), (4, 0.10), (6, 0.12), (8, 0.14), (10, 0.16)),
    "smk": (0.2, 0.35, 0.5, 0.65, 0.8),
    "rain": ((0.02, 0.25), (0.04, 0.3), (0.06, 0.35), (0.09, 0.4), (0.12, 0.45)),
    "dust": ((0.01, 0.1), (0.02, 0.2), (0.04, 0.3), (0.07, 0.4), (0.10, 0.5)),
}


def severities(ctype: str) -> tuple:
    return tuple(range(0, 6)) if ctype in CALIBRATED else tuple(range(1, 6))


@dataclass(frozen=True)
class CorruptionSpec:
    type: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        check_type(self.type)
        if self.severity not in severities(self.type):
            raise ValueError(f"severity {self.severity} not available for {self.type}")


def check_type(ctype: str) -> None:
    if ctype not in IMPLEMENTED:
        extra = f" ({UNIMPLEMENTED[ctype]} is listed but not implemented)" if ctype in UNIMPLEMENTED else ""
        raise ValueError(f"unknown corruption {ctype!r}{extra}; implemented: {', '.join(IMPLEMENTED)}")


def manifest() -> dict:
    return {"implemented": {k: NAMES[k] for k in IMPLEMENTED}, "unimplemented": dict(UNIMPLEMENTED)}


def _param(ctype, severity):
    p = PARAMS[ctype]
    return p[severity] if ctype in CALIBRATED else p[severity - 1]


def value_noise(rng: Rng, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Smooth field in [0, 1]: bilinear interpolation of a random lattice."""
    grid = rng.uniform(size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0, cells, w) if w > 1 else np.zeros(1)
    return ndimage.map_coordinates(grid, np.meshgrid(ys, xs, indexing="ij"), order=1, mode="nearest")


def _disk(r: float) -> np.ndarray:
    k = int(np.ceil(r))
    y, x = np.mgrid[-k:k + 1, -k:k + 1]
    d = (x * x + y * y <= r * r).astype(np.float64)
    return d / d.sum()


def _blur(x: np.ndarray, r: float) -> np.ndarray:
    k = _disk(r)
    return np.stack([ndimage.convolve(x[..., c], k, mode="nearest") for c in range(x.shape[2])], axis=-1)


def _gaus(x, s, rng):
    return x + rng.normal(x.shape, scale=_param("gaus", s))


def _shot(x, s, rng):
    lam = _param("shot", s)
    return rng.poisson(x / 255.0 * lam) / lam * 255.0


def _imp(x, s, rng):
    flat = x.reshape(-1).copy()
    order = rng.permutation(flat.size)
    salt = rng.uniform(size=flat.size) < 0.5
    m = int(round_half_away(_param("imp", s) * flat.size))
    idx = order[:m]
    flat[idx] = np.where(salt[:m], 255.0, 0.0)
    return flat.reshape(x.shape)


def _brt(x, s, rng):
    # scaling every channel scales HSV value and leaves hue and saturation alone
    return x * _param("brt", s)


def _cnt(x, s, rng):
    m = x.mean(axis=(0, 1), keepdims=True)
    return (x - m) * _param("cnt", s) + m


def _px(x, s, rng):
    b = _param("px", s)
    h, w, _ = x.shape
    out = np.empty_like(x)
    for i in range(0, h, b):
        for j in range(0, w, b):
            blk = x[i:i + b, j:j + b]
            out[i:i + b, j:j + b] = blk.mean(axis=(0, 1))
    return out


def _dfcs(x, s, rng):
    return _blur(x, _param("dfcs", s))


def _haze(x, rng, amount, color):
    f = 0.5 + 0.5 * value_noise(rng, x.shape[0], x.shape[1])
    a = (amount * f)[..., None]
    return x * (1 - a) + np.asarray(color, dtype=np.float64) * a


def _fg(x, s, rng):
    return _haze(x, rng, _param("fg", s), (255.0, 255.0, 255.0))


def _smk(x, s, rng):
    return _haze(x, rng, _param("smk", s), (150.0, 105.0, 80.0))


def _sun(x, s, rng):
    frac, intensity = _param("sun", s)
    h, w, _ = x.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    r = frac * max(h, w)
    y, xx = np.mgrid[0:h, 0:w]
    d = np.sqrt((y + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2)
    glow = intensity * np.clip(1.0 - d / r, 0.0, None) ** 2
    return x + glow[..., None] * np.array([1.0, 0.95, 0.8])


def _wtd(x, s, rng):
    count, rad = _param("wtd", s)
    h, w, _ = x.shape
    r = max(1.0, rad * max(h, w))
    blurred = _blur(x, r) * 1.05 + 6.0
    out = x.copy()
    y, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rr = r * rng.uniform(0.7, 1.3)
        m = (y + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= rr * rr
        out[m] = blurred[m]
    return out


def _rain(x, s, rng):
    density, strength = _param("rain", s)
    h, w, _ = x.shape
    n = max(1, int(round_half_away(density * h * w)))
    length = max(2, int(round_half_away(0.25 * max(h, w))))
    out = x.copy()
    color = np.array([210.0, 210.0, 225.0])
    for _ in range(n):
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        for t in range(length):
            yy, xx = y0 + t, x0 - t // 2
            if 0 <= yy < h and 0 <= xx < w:
                out[yy, xx] = out[yy, xx] * (1 - strength) + color * strength
    return out


def _dust(x, s, rng):
    frac, haze = _param("dust", s)
    h, w, _ = x.shape
    sepia = x @ np.array([[0.393, 0.349, 0.272], [0.769, 0.686, 0.534], [0.189, 0.168, 0.131]])
    out = x * (1 - haze) + np.clip(sepia, 0, 255) * haze
    order = rng.permutation(h * w)
    m = int(round_half_away(frac * h * w))
    flat = out.reshape(-1, 3)
    flat[order[:m]] = flat[order[:m]] * 0.2 + np.array([40.0, 32.0, 24.0]) * 0.8
    return flat.reshape(x.shape)


_FNS = {"gaus": _gaus, "shot": _shot, "imp": _imp, "dfcs": _dfcs, "fg": _fg, "brt": _brt, "cnt": _cnt,
        "px": _px, "sun": _sun, "wtd": _wtd, "smk": _smk, "rain": _rain, "dust": _dust}


def corrupt(img: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an 8-bit RGB image of shape (h, w, 3)")
    x = img.astype(np.float64)
    y = _FNS[spec.type](x, spec.severity, Rng(spec.seed, f"corrupt/{spec.type}"))
    return np.clip(round_half_away(y), 0, 255).astype(np.uint8)


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def severity_profile(img, ctype: str, seed: int = 0) -> np.ndarray:
    """MSE against the clean image for each available severity (0 first for calibrated types)."""
    check_type(ctype)
    return np.array([mse(corrupt(img, CorruptionSpec(ctype, s, seed)), img) for s in severities(ctype)])


# ---------------------------------------------------------------- PPM I/O

def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 images are supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: maxval must be 255")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def image_seed(seed: int, filename: str, ctype: str, severity: int) -> int:
    digest = hashlib.sha256(f"{seed}:{filename}:{ctype}:{severity}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def corrupt_dataset(input_dir, output_dir, specs, seed: int = 0, jobs: int = 1,
                    config_hash: str = "") -> list[dict]:
    """Corrupt every ``*.ppm`` under ``input_dir`` with every ``(type, severity)`` in ``specs``.

    Outputs go to ``output_dir/<type>-<severity>/<name>``; the manifest is also
    written to ``output_dir/manifest.jsonl`` with paths relative to the input and
    output directories. Output bytes do not depend on ``jobs``.
    """
    specs = [(str(t), int(s)) for t, s in specs]
    for t, s in specs:
        CorruptionSpec(t, s)
    inp, out = Path(input_dir), Path(output_dir)
    files = sorted(p for p in inp.iterdir() if p.suffix.lower() == ".ppm") if specs else []
    tasks = [(f, t, s) for f in files for t, s in specs]

    def run(task):
        f, t, s = task
        dst = out / f"{t}-{s}" / f.name
        entry = {"src": f.name, "dst": f"{t}-{s}/{f.name}", "type": t, "severity": s,
                 "seed": image_seed(seed, f.name, t, s)}
        if config_hash:
            entry["config_hash"] = config_hash
        try:
            img = read_ppm(f)
        except (OSError, ValueError) as exc:
            entry["dst"] = None
            entry["error"] = str(exc)
            return entry
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(dst, corrupt(img, CorruptionSpec(t, s, entry["seed"])))
        return entry

    out.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            entries = list(ex.map(run, tasks))
    else:
        entries = [run(t) for t in tasks]
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    return entries
