"""Training objective (MRAE), evaluation metrics, AdamW with cosine
annealing, the reproducible training loop with the two-stage strategy, and
MRAE heatmap emission."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from ect import tensor as T
from ect.datapipe import augment, extract_patches
from ect.network import EctModel, load_partial, save_checkpoint
from ect.tensor import NumericsError, ShapeError, Tensor

PSNR_CAP_DB = 100.0  # sentinel reported for (near-)identical images


@dataclass
class TrainConfig:
    lr_max: float = 4e-4
    lr_min: float = 1e-6
    total_iters: int = 2000
    batch_size: int = 4
    patch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    mrae_eps: float = 1e-3
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if min(self.lr_max, self.lr_min, self.total_iters, self.batch_size) <= 0:
            raise ValueError("learning rates, iterations, and batch size must be positive")


def paper_profile(stage: int = 2) -> TrainConfig:
    """The full-scale schedule (3e5 iterations); not a desk-scale gate."""
    if stage == 1:
        return TrainConfig(lr_max=5.6e-4, total_iters=200_000, batch_size=40, patch_size=128)
    return TrainConfig(lr_max=3e-4, total_iters=300_000, batch_size=20, patch_size=128)


# -- metrics ---------------------------------------------------------------

def mrae(pred: Tensor, gt: np.ndarray, eps: float = 1e-3) -> Tensor:
    """mean(|pred - gt| / max(|gt|, eps)), differentiable w.r.t. pred."""
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if pred.shape != gt.shape:
        raise ShapeError(f"mrae shape mismatch: {pred.shape} vs {gt.shape}")
    inv_denom = Tensor(1.0 / np.maximum(np.abs(gt), eps))
    return T.mean(T.mul(T.abs_(T.sub(pred, Tensor(gt))), inv_denom))


def mrae_value(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-3) -> float:
    return float(np.mean(np.abs(pred - gt) / np.maximum(np.abs(gt), eps)))


def rmse_value(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ShapeError(f"rmse shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def psnr_value(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    mse = np.mean((pred - gt) ** 2)
    if mse <= 0:
        return PSNR_CAP_DB
    return float(min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB))


def sam_value(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-8) -> float:
    """Mean per-pixel spectral angle (radians) over the band axis."""
    if pred.shape != gt.shape:
        raise ShapeError(f"sam shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.reshape(pred.shape[0], -1)
    g = gt.reshape(gt.shape[0], -1)
    num = (p * g).sum(axis=0)
    den = np.linalg.norm(p, axis=0) * np.linalg.norm(g, axis=0) + eps
    return float(np.mean(np.arccos(np.clip(num / den, -1.0, 1.0))))


# -- optimizer and schedule ------------------------------------------------

def cosine_lr(t: int, cfg: TrainConfig) -> float:
    if not 0 <= t <= cfg.total_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.total_iters}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.total_iters))


class AdamW:
    """Decoupled weight decay (applied before the update) + bias-corrected Adam."""

    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient at step {t}")
            if cfg.weight_decay:
                p.data -= lr * cfg.weight_decay * p.data
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# -- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    losses: list
    lrs: list
    final_mrae: float
    iters_run: int


def train(model: EctModel, pairs: list[tuple[np.ndarray, np.ndarray]],
          cfg: TrainConfig, out_dir: Optional[str] = None,
          log: Optional[Callable[[str], None]] = None,
          stop_below: Optional[float] = None) -> TrainResult:
    """sample -> augment -> forward -> MRAE -> backward -> AdamW -> cosine LR.

    ``pairs`` are full-size (rgb, hsi) images; patches are drawn with a
    seed-fixed sequence so the loss trace is reproducible bitwise.
    """
    if not pairs:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params(), cfg)
    losses, lrs = [], []
    csv_lines = ["iter,lr,loss,mrae,rmse,psnr,sam"]
    final = math.inf
    it = 0
    for it in range(1, cfg.total_iters + 1):
        lr = cosine_lr(it - 1, cfg)
        model.zero_grad()
        batch_losses = []
        for _ in range(cfg.batch_size):
            rgb, hsi = pairs[rng.integers(len(pairs))]
            _, H, W = rgb.shape
            ps = min(cfg.patch_size, H, W)
            y = rng.integers(H - ps + 1)
            x = rng.integers(W - ps + 1)
            rp = rgb[:, y:y + ps, x:x + ps]
            hp = hsi[:, y:y + ps, x:x + ps]
            rp, hp = augment(rp, hp, int(rng.integers(8)))
            pred = model.forward(Tensor(rp))
            batch_losses.append(mrae(pred, hp, eps=cfg.mrae_eps))
        loss = batch_losses[0] if len(batch_losses) == 1 else T.mul(
            sum(batch_losses[1:], batch_losses[0]), 1.0 / len(batch_losses))
        lv = loss.item()
        if not math.isfinite(lv):
            raise NumericsError(f"non-finite loss at iteration {it}")
        loss.backward()
        opt.step(lr)
        losses.append(lv)
        lrs.append(lr)
        final = lv
        if log and (it % cfg.eval_every == 0 or it == 1):
            log(f"iter {it} lr {lr:.3e} loss {lv:.5f}")
        if it % cfg.eval_every == 0 or it == cfg.total_iters:
            pv = pred.numpy()
            csv_lines.append(
                f"{it},{lr:.6e},{lv:.8f},{mrae_value(pv, hp, cfg.mrae_eps):.6f},"
                f"{rmse_value(pv, hp):.6f},{psnr_value(pv, hp):.3f},{sam_value(pv, hp):.6f}")
        if out_dir and it % cfg.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(out_dir, f"ckpt_{it:07d}.ect"))
        if stop_below is not None and lv < stop_below:
            break
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "ckpt_final.ect"))
        with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
            f.write("\n".join(csv_lines) + "\n")
        with open(os.path.join(out_dir, "loss_trace.txt"), "w") as f:
            f.writelines(f"{v!r}\n" for v in losses)
    return TrainResult(losses=losses, lrs=lrs, final_mrae=final, iters_run=it)


def train_two_stage(build_model: Callable[[int], EctModel],
                    pairs: list, cfg: TrainConfig, out_dir: str,
                    log: Optional[Callable[[str], None]] = None
                    ) -> tuple[EctModel, TrainResult, TrainResult]:
    """Pretrain a 1-stage model (higher peak LR), load its weights into
    stage 0 of the 2-stage model, continue training the whole model."""
    os.makedirs(out_dir, exist_ok=True)
    pre_cfg = replace(cfg, lr_max=cfg.lr_max * 5.6 / 4.0)
    pre = build_model(1)
    res1 = train(pre, pairs, pre_cfg, out_dir=None, log=log)
    pre_path = os.path.join(out_dir, "pretrain_stage1.ect")
    save_checkpoint(pre, pre_path)
    full = build_model(2)
    loaded = load_partial(full, pre_path)
    if log:
        log(f"two-stage handoff: loaded {loaded} tensors into stage 0")
    main_cfg = replace(cfg, lr_max=cfg.lr_max * 3.0 / 4.0)
    res2 = train(full, pairs, main_cfg, out_dir=out_dir, log=log)
    return full, res1, res2


# -- evaluation and heatmaps ----------------------------------------------

HEATMAP_BANDS = (0, 10, 20, 30)  # 400 / 500 / 600 / 700 nm


def band_to_nm(band: int) -> int:
    return 400 + 10 * band


def write_pgm(path: str, img: np.ndarray) -> None:
    H, W = img.shape
    data = np.floor(np.clip(img, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _colormap(v: np.ndarray) -> np.ndarray:
    """Fixed blue -> green -> red map on [0, 1] -> [3, H, W] in [0, 1]."""
    r = np.clip(2.0 * v - 1.0, 0, 1)
    g = 1.0 - np.abs(2.0 * v - 1.0)
    b = np.clip(1.0 - 2.0 * v, 0, 1)
    return np.stack([r, g, b])


def evaluate(model: EctModel, pairs: list[tuple[np.ndarray, np.ndarray]],
             out_dir: Optional[str] = None, mrae_eps: float = 1e-3,
             names: Optional[list[str]] = None) -> dict:
    """Per-image MRAE/RMSE/PSNR/SAM plus per-band MRAE heatmaps for the
    400/500/600/700 nm bands (grayscale PGM and colormapped PPM)."""
    from ect.datapipe import write_ppm

    per_image = []
    for i, (rgb, hsi) in enumerate(pairs):
        pred = model.forward(Tensor(rgb)).numpy()
        per_image.append({
            "mrae": mrae_value(pred, hsi, mrae_eps),
            "rmse": rmse_value(pred, hsi),
            "psnr": psnr_value(pred, hsi),
            "sam": sam_value(pred, hsi),
        })
        if out_dir:
            name = names[i] if names else f"image{i:03d}"
            for band in HEATMAP_BANDS:
                hm = np.abs(pred[band] - hsi[band]) / np.maximum(np.abs(hsi[band]), mrae_eps)
                scaled = np.clip(hm, 0.0, 1.0)
                write_pgm(os.path.join(out_dir, f"{name}_{band_to_nm(band)}nm.pgm"), scaled)
                write_ppm(os.path.join(out_dir, f"{name}_{band_to_nm(band)}nm.ppm"), _colormap(scaled))
    agg = {k: float(np.mean([m[k] for m in per_image])) for k in ("mrae", "rmse", "psnr", "sam")}
    return {"mean": agg, "per_image": per_image}
