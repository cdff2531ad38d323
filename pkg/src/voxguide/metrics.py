"""Image-quality metrics, image/depth file formats and split evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .svo import ParseError

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM on the channel-mean grayscale image, 11x11 Gaussian
    window (sigma 1.5), averaged over valid window positions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("SSIM needs images of at least 11x11")
    g = _gaussian_window()
    win = np.outer(g, g)

    def filt(x):
        return convolve2d(x, win, mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# file formats


def write_ppm(path, image) -> None:
    """Binary 8-bit P6; float images in [0, 1] are quantised by rounding."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path, as_uint8: bool = False) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header", pos)
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ParseError("not a binary PPM (P6)", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("bad PPM header field", pos) from None
    if maxval != 255:
        raise ParseError("only 8-bit PPM is supported", pos)
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise ParseError(f"PPM pixel data truncated: need {need} bytes, have {len(data) - pos}", len(data))
    img = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return img.copy() if as_uint8 else img.astype(np.float64) / 255.0


def write_png(path, image) -> bool:
    """PNG via Pillow when installed; returns False if unavailable."""
    try:
        from PIL import Image
    except ImportError:
        return False
    img = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)
    return True


def write_depth(path, depth) -> None:
    """Raw little-endian float32 plus a ``.json`` sidecar with the shape."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth map must be 2-D")
    Path(path).write_bytes(d.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"width": d.shape[1], "height": d.shape[0],
                                                     "units": "meters", "dtype": "float32-le"}))


def read_depth(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    data = Path(path).read_bytes()
    n = meta["width"] * meta["height"]
    if len(data) != 4 * n:
        raise ParseError(f"depth file holds {len(data)} bytes, expected {4 * n}", len(data))
    return np.frombuffer(data, dtype="<f4").reshape(meta["height"], meta["width"]).astype(np.float64)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    split: str
    views: list[int]
    psnr: list[float]
    ssim: list[float]
    depth_mae: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_depth_mae(self) -> float:
        return float(np.mean(self.depth_mae)) if self.depth_mae else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        d["mean_depth_mae"] = self.mean_depth_mae
        return d

    def write(self, path_json, path_csv=None) -> None:
        Path(path_json).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        if path_csv is not None:
            with open(path_csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["split", "view", "psnr", "ssim", "depth_mae"])
                for i, v in enumerate(self.views):
                    mae = self.depth_mae[i] if self.depth_mae else ""
                    w.writerow([self.split, v, f"{self.psnr[i]:.6f}", f"{self.ssim[i]:.6f}",
                                f"{mae:.6f}" if mae != "" else ""])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate(params, svo, dataset, split: str, sampler_cfg, seed: int = 0, threads: int = 1,
             out_dir=None, meta: dict | None = None) -> EvalReport:
    """Render every view of ``split`` and compare to ground truth.

    With ``out_dir``, writes ``report_<split>.json/.csv`` and a
    prediction/ground-truth strip per view.
    """
    from .render import render_image

    views = dataset.indices(split)
    if not views:
        raise ValueError(f"split {split!r} is empty")
    rep = EvalReport(split, views, [], [], [], dict(meta or {}))
    for v in views:
        r = render_image(params, svo, dataset.cameras[v], sampler_cfg, seed=seed, view_id=v, threads=threads)
        gt = dataset.images[v]
        rep.psnr.append(psnr(r.image, gt))
        rep.ssim.append(ssim(r.image, gt))
        rep.depth_mae.append(float(np.mean(np.abs(r.depth - dataset.depths[v]))))
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_ppm(out / f"{split}_{v:04d}.ppm", np.concatenate([r.image, gt], axis=1))
    if out_dir is not None:
        rep.write(Path(out_dir) / f"report_{split}.json", Path(out_dir) / f"report_{split}.csv")
    return rep
