"""Synthetic hyperspectral data and the HSI -> RGB simulation pipeline:
SRF projection, Gaussian-approximated Poisson shot noise plus Gaussian dark
noise, mean normalization to 0.18, and a quantized-DCT JPEG round trip.
Also patch extraction, dihedral augmentation, and bit-exact file I/O.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter

BANDS = 31
WAVELENGTHS_NM = np.arange(400, 701, 10)

HSI_MAGIC = b"ECTHSI1\n"


class DataFormatError(IOError):
    pass


@dataclass
class SimConfig:
    shot_gain: float = 0.01     # variance of shot noise is shot_gain * signal
    dark_std: float = 0.005
    target_mean: float = 0.18
    jpeg_quality: Optional[int] = 85  # None skips the codec stage
    mosaic: bool = False        # Bayer RGGB mosaic/demosaic variant, no 0.18 step
    seed: int = 0

    def __post_init__(self):
        if self.shot_gain < 0 or self.dark_std < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg quality {self.jpeg_quality} outside [1, 100]")


# -- spectral response function -------------------------------------------

def default_srf() -> np.ndarray:
    """The 31 x 3 response matrix shipped with the package (unit column sums)."""
    ref = importlib.resources.files("ect.data").joinpath("srf_default.csv")
    rows = [line.split(",") for line in ref.read_text().strip().splitlines()[1:]]
    srf = np.array([[float(v) for v in r[1:]] for r in rows])
    return srf


def validate_srf(srf: np.ndarray) -> np.ndarray:
    srf = np.asarray(srf, dtype=np.float64)
    if srf.shape != (BANDS, 3):
        raise DataFormatError(f"SRF must be {BANDS}x3, got {srf.shape}")
    if np.any(srf < 0):
        raise DataFormatError("SRF entries must be non-negative")
    if np.any(srf.sum(axis=0) <= 0):
        raise DataFormatError("every SRF column needs a positive sum")
    return srf


# -- synthesis ------------------------------------------------------------

def synth_hsi(seed: int, H: int, W: int, n_materials: int = 4) -> np.ndarray:
    """Random but realistic reflectance cube [31, H, W].

    Each material is a smooth positive spectrum (1-3 Gaussians over
    wavelength); spatial abundances are normalized smoothed random fields,
    so the band x pixel matrix has numerical rank <= n_materials.
    """
    if n_materials < 1:
        raise ValueError("need at least one material")
    rng = np.random.default_rng(seed)
    lam = WAVELENGTHS_NM.astype(np.float64)
    spectra = np.zeros((n_materials, BANDS))
    for m in range(n_materials):
        for _ in range(rng.integers(1, 4)):
            center = rng.uniform(400, 700)
            width = rng.uniform(25, 120)
            amp = rng.uniform(0.2, 1.0)
            spectra[m] += amp * np.exp(-0.5 * ((lam - center) / width) ** 2)
        spectra[m] += 0.02  # broadband floor keeps reflectance positive
    fields = rng.random((n_materials, H, W))
    fields = gaussian_filter(fields, sigma=(0, max(H, W) / 16, max(H, W) / 16))
    fields = np.maximum(fields, 1e-6)
    abund = fields / fields.sum(axis=0, keepdims=True)
    cube = np.einsum("mb,mhw->bhw", spectra, abund)
    return cube.astype(np.float32)


# -- simulation stages ----------------------------------------------------

def project_rgb(hsi: np.ndarray, srf: np.ndarray) -> np.ndarray:
    """Per-pixel 31-vector x SRF -> clean RAW [3, H, W]."""
    if hsi.ndim != 3 or hsi.shape[0] != BANDS:
        raise DataFormatError(f"HSI must be [{BANDS}, H, W], got {hsi.shape}")
    srf = validate_srf(srf)
    return np.einsum("bhw,bc->chw", hsi.astype(np.float64), srf)


def add_noise(raw: np.ndarray, cfg: SimConfig, seed: Optional[int] = None) -> np.ndarray:
    """y = x + N(0, a*x) + N(0, b^2): Gaussian shot-noise approximation plus
    dark noise; deterministic under the seed."""
    if np.any(raw < 0):
        raise ValueError("raw signal must be non-negative")
    if cfg.shot_gain == 0 and cfg.dark_std == 0:
        return raw.copy()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    shot = np.sqrt(cfg.shot_gain * raw) * rng.standard_normal(raw.shape)
    dark = cfg.dark_std * rng.standard_normal(raw.shape)
    return raw + shot + dark


def normalize_mean(img: np.ndarray, target: float = 0.18) -> np.ndarray:
    m = img.mean()
    if m <= 0:
        raise ValueError(f"cannot normalize: image mean {m} is not positive")
    return img * (target / m)


# -- JPEG-style codec ------------------------------------------------------

_Q_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)

_Q_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)

_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312]])


def _quality_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    def mk(base):
        return np.clip(np.floor((base * scale + 50.0) / 100.0), 1, 255)
    return mk(_Q_LUMA), mk(_Q_CHROMA)


def _blockwise_quantize(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    H, W = plane.shape
    ph, pw = (-H) % 8, (-W) % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    out = np.empty_like(p)
    for i in range(0, p.shape[0], 8):
        for j in range(0, p.shape[1], 8):
            blk = p[i:i + 8, j:j + 8]
            coef = dctn(blk, type=2, norm="ortho")
            coef = np.round(coef / table) * table
            out[i:i + 8, j:j + 8] = idctn(coef, type=2, norm="ortho")
    return out[:H, :W]


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Approximate codec: YCbCr 8x8 DCT quantization round trip, no entropy
    coding (lossless anyway) and no chroma subsampling.  Input in [0, 1]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality {quality} outside [1, 100]")
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataFormatError(f"expected [3, H, W] image, got {img.shape}")
    ql, qc = _quality_tables(quality)
    rgb = img.astype(np.float64) * 255.0
    ycc = np.einsum("ij,jhw->ihw", _RGB2YCC, rgb)
    ycc[0] -= 128.0
    rec = np.stack([
        _blockwise_quantize(ycc[0], ql),
        _blockwise_quantize(ycc[1], qc),
        _blockwise_quantize(ycc[2], qc)])
    rec[0] += 128.0
    out = np.einsum("ij,jhw->ihw", np.linalg.inv(_RGB2YCC), rec) / 255.0
    return np.clip(out, 0.0, 1.0)


# -- Bayer mosaic variant --------------------------------------------------

def mosaic_rggb(rgb: np.ndarray) -> np.ndarray:
    """Sample a [3, H, W] image onto a single-plane RGGB Bayer mosaic."""
    _, H, W = rgb.shape
    out = np.empty((H, W), dtype=rgb.dtype)
    out[0::2, 0::2] = rgb[0, 0::2, 0::2]
    out[0::2, 1::2] = rgb[1, 0::2, 1::2]
    out[1::2, 0::2] = rgb[1, 1::2, 0::2]
    out[1::2, 1::2] = rgb[2, 1::2, 1::2]
    return out


def demosaic_bilinear(mosaic: np.ndarray) -> np.ndarray:
    """Bilinear demosaic of an RGGB plane back to [3, H, W]."""
    from scipy.ndimage import convolve
    H, W = mosaic.shape
    masks = np.zeros((3, H, W))
    masks[0, 0::2, 0::2] = 1
    masks[1, 0::2, 1::2] = 1
    masks[1, 1::2, 0::2] = 1
    masks[2, 1::2, 1::2] = 1
    k_rb = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
    k_g = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
    out = np.empty((3, H, W))
    for ch, kern in ((0, k_rb), (1, k_g), (2, k_rb)):
        sparse = mosaic * masks[ch]
        out[ch] = convolve(sparse, kern, mode="mirror")
    return out


# -- full pipeline ---------------------------------------------------------

def simulate_rgb(hsi: np.ndarray, srf: np.ndarray, cfg: SimConfig,
                 seed: Optional[int] = None) -> np.ndarray:
    """HSI [31, H, W] -> simulated camera RGB [3, H, W] in [0, 1]."""
    raw = project_rgb(hsi, srf)
    if cfg.mosaic:
        plane = mosaic_rggb(raw)
        plane = add_noise(np.maximum(plane, 0.0), cfg, seed=seed)
        img = demosaic_bilinear(plane)
    else:
        img = add_noise(raw, cfg, seed=seed)
        img = normalize_mean(img, cfg.target_mean)
    if cfg.jpeg_quality is not None:
        img = jpeg_roundtrip(np.clip(img, 0.0, 1.0), cfg.jpeg_quality)
    return np.clip(img, 0.0, 1.0)


# -- patches and augmentation ---------------------------------------------

def extract_patches(rgb: np.ndarray, hsi: np.ndarray, size: int = 128,
                    stride: Optional[int] = None, seed: int = 0
                    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Aligned RGB/HSI crops on a stride grid, order shuffled by the seed."""
    _, H, W = rgb.shape
    if hsi.shape[1:] != (H, W):
        raise DataFormatError(f"misaligned pair: rgb {rgb.shape}, hsi {hsi.shape}")
    if size > H or size > W:
        raise DataFormatError(f"patch size {size} exceeds extents {H}x{W}")
    stride = stride or size
    offsets = [(y, x)
               for y in range(0, H - size + 1, stride)
               for x in range(0, W - size + 1, stride)]
    rng = np.random.default_rng(seed)
    rng.shuffle(offsets)
    for y, x in offsets:
        yield rgb[:, y:y + size, x:x + size], hsi[:, y:y + size, x:x + size]


def augment(rgb: np.ndarray, hsi: np.ndarray, op: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply dihedral-group element op in [0, 8): rot90 x (op % 4), flip if op >= 4."""
    if not 0 <= op < 8:
        raise ValueError(f"augment op {op} outside [0, 8)")
    def f(a):
        a = np.rot90(a, k=op % 4, axes=(1, 2))
        if op >= 4:
            a = a[:, :, ::-1]
        return np.ascontiguousarray(a)
    return f(rgb), f(hsi)


# -- file I/O --------------------------------------------------------------

def write_hsi(path: str, cube: np.ndarray) -> None:
    """Container: magic, 'H W bands' ASCII line, band-major f32 LE planes."""
    if cube.ndim != 3:
        raise DataFormatError(f"expected [bands, H, W], got {cube.shape}")
    bands, H, W = cube.shape
    with open(path, "wb") as f:
        f.write(HSI_MAGIC)
        f.write(f"{H} {W} {bands}\n".encode("ascii"))
        f.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def read_hsi(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(HSI_MAGIC))
        if magic != HSI_MAGIC:
            raise DataFormatError(f"bad magic in {path!r}: {magic!r}")
        header = f.readline().decode("ascii").split()
        if len(header) != 3:
            raise DataFormatError(f"malformed header in {path!r}")
        H, W, bands = (int(v) for v in header)
        buf = f.read(4 * H * W * bands)
        if len(buf) != 4 * H * W * bands:
            raise DataFormatError(f"truncated payload in {path!r}")
    return np.frombuffer(buf, dtype="<f4").reshape(bands, H, W).copy()


def write_ppm(path: str, img: np.ndarray) -> None:
    """Binary P6 PPM from a [3, H, W] float image in [0, 1] (round-half-up)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataFormatError(f"expected [3, H, W], got {img.shape}")
    _, H, W = img.shape
    bytes_ = np.floor(np.clip(img, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(bytes_.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise DataFormatError(f"{path!r} is not a binary PPM")
        dims = f.readline().split()
        maxval = int(f.readline())
        if maxval != 255:
            raise DataFormatError(f"unsupported maxval {maxval}")
        W, H = int(dims[0]), int(dims[1])
        buf = f.read(3 * H * W)
        if len(buf) != 3 * H * W:
            raise DataFormatError(f"truncated pixel data in {path!r}")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(H, W, 3)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_manifest(path: str, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w") as f:
        for rgb_path, hsi_path in pairs:
            f.write(f"{rgb_path}\t{hsi_path}\n")


def read_manifest(path: str) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"bad manifest line: {line!r}")
            pairs.append((parts[0], parts[1]))
    return pairs


def convert_ntire_archive(path: str) -> None:
    """Placeholder for ingesting the official challenge archives."""
    raise UnsupportedArchiveError(
        "reading official .mat/HDF5 archives is unimplemented; use synth-data "
        "plus simulate-rgb, or convert externally to the ECTHSI1 container")


class UnsupportedArchiveError(NotImplementedError):
    pass
