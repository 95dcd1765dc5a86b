"""Optimizer, checkpoints, the training loop and evaluation helpers."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict

import numpy as np

from .data import ClipDataset, VideoClip, bicubic_upscale, make_lr, window_frames
from .losses import FeatureNet, LossWeights, total_loss
from .metrics import MetricReport
from .model import DSMC, ModelConfig
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "total", "cb_primal", "perc_primal", "cb_dual", "perc_dual")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

CKPT_MAGIC = b"DSMC-CKPT\x00\x00\x00"
CKPT_VERSION = 1


def _tensor_table(model, opt):
    table = [(f"param/{n}", p.data) for n, p in model.named_parameters()]
    table += [(f"buffer/{n}", b) for n, b in model.named_buffers()]
    if opt is not None:
        table += [(f"adam_m/{n}", opt.m[n]) for n, _ in opt.params]
        table += [(f"adam_v/{n}", opt.v[n]) for n, _ in opt.params]
    return table


def checkpoint_bytes(model: DSMC, opt: Adam | None, iteration: int, config: dict | None = None) -> bytes:
    """Header (magic, version), counters, JSON config snapshot, then a named
    table of little-endian float32 tensors."""
    cfg = {"model": asdict(model.cfg), "ablations": sorted(model.ablations)}
    if config:
        cfg["run"] = config
    blob = json.dumps(cfg, sort_keys=True, default=list).encode("utf-8")
    table = _tensor_table(model, opt)
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
           struct.pack("<QQ", iteration, opt.t if opt is not None else 0),
           struct.pack("<I", len(blob)), blob, struct.pack("<I", len(table))]
    for name, arr in table:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def parse_checkpoint(raw: bytes) -> dict:
    if raw[:12] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 12)
    if version != CKPT_VERSION:
        raise ValueError(f"checkpoint format version {version} is not supported (this build reads version {CKPT_VERSION})")
    iteration, adam_t = struct.unpack_from("<QQ", raw, 16)
    (blen,) = struct.unpack_from("<I", raw, 32)
    config = json.loads(raw[36:36 + blen].decode("utf-8"))
    pos = 36 + blen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, "<f4", size, pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(raw):
        raise ValueError("trailing bytes after checkpoint tensor table")
    return {"iteration": iteration, "adam_t": adam_t, "config": config, "tensors": tensors}


def save_checkpoint(path, model, opt, iteration, config=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, opt, iteration, config))


def model_from_checkpoint(ckpt: dict) -> DSMC:
    mc = dict(ckpt["config"]["model"])
    return DSMC(ModelConfig(**mc), ckpt["config"].get("ablations", ()))


def restore(ckpt: dict, model: DSMC, opt: Adam | None = None) -> int:
    """Copy tensors into ``model`` (and ``opt``); returns the iteration."""
    t = ckpt["tensors"]

    def put(name, dst):
        if name not in t:
            raise ValueError(f"checkpoint is missing {name!r}")
        if t[name].shape != dst.shape:
            raise ValueError(f"{name}: checkpoint shape {t[name].shape} vs model {dst.shape}")
        dst[...] = t[name]

    for n, p in model.named_parameters():
        put(f"param/{n}", p.data)
    for n, b in model.named_buffers():
        put(f"buffer/{n}", b)
    if opt is not None:
        for n, _ in opt.params:
            put(f"adam_m/{n}", opt.m[n])
            put(f"adam_v/{n}", opt.v[n])
        opt.t = ckpt["adam_t"]
    return ckpt["iteration"]


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

def loss_weights(tcfg, ablations=()) -> LossWeights:
    dual = 0.0 if "no_dual" in ablations else tcfg.dual_weight
    perc = 0.0 if "no_perceptual" in ablations else tcfg.perceptual_weight
    return LossWeights(primal=tcfg.primal_weight, dual=dual, perceptual=perc, eps=tcfg.charbonnier_eps,
                       primal_terms=tcfg.primal_terms, dual_terms=tcfg.dual_terms)


class Trainer:
    """Owns model, optimizer and dataset.  Batches depend only on
    (seed, iteration), so a resumed run reproduces an uninterrupted one."""

    def __init__(self, model: DSMC, dataset: ClipDataset, tcfg, featnet: FeatureNet | None = None):
        self.model, self.dataset, self.tcfg = model, dataset, tcfg
        self.weights = loss_weights(tcfg, model.ablations)
        self.featnet = featnet if featnet is not None else FeatureNet()
        params = [(n, p) for n, p in model.trainable_parameters()]
        if self.weights.dual == 0:
            params = [(n, p) for n, p in params if not n.startswith("dual.")]
        self.opt = Adam(params, tcfg.lr, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps)
        self.iteration = 0
        self.initial_loss = None
        self._over = 0
        self.history = []

    def step(self) -> dict:
        it = self.iteration + 1
        window, gt = self.dataset.batch(self.tcfg.seed, it, self.tcfg.batch, self.tcfg.patch, self.tcfg.augment)
        self.model.train()
        self.opt.zero_grad()
        sr = self.model(Tensor(window))
        lr_center = window[:, window.shape[1] // 2]
        dual_out = self.model.dual(sr) if self.weights.dual > 0 else None
        loss, record = total_loss(sr, gt, lr_center, dual_out, self.weights, self.featnet)
        if not math.isfinite(record["total"]):
            raise TrainingError(f"non-finite loss at iteration {it}")
        backward(loss)
        self.opt.step()
        self.iteration = it
        record["iteration"] = it
        self._watch(record["total"])
        self.history.append(record)
        return record

    def _watch(self, total):
        if self.initial_loss is None:
            self.initial_loss = total
            return
        if total > self.tcfg.divergence_factor * self.initial_loss:
            self._over += 1
            if self._over >= self.tcfg.divergence_patience:
                raise DivergenceError(
                    f"loss {total:.4g} above {self.tcfg.divergence_factor}x the initial "
                    f"{self.initial_loss:.4g} for {self._over} consecutive iterations")
        else:
            self._over = 0

    def run(self, iterations: int, loss_csv=None, ckpt_path=None, run_config=None):
        writer = fh = None
        if loss_csv is not None:
            append = self.iteration > 0
            fh = open(loss_csv, "a" if append else "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if not append:
                writer.writerow(LOSS_COLUMNS)
        t0 = time.perf_counter()
        try:
            while self.iteration < iterations:
                rec = self.step()
                it = rec["iteration"]
                if writer is not None and (it % self.tcfg.log_every == 0 or it == iterations):
                    writer.writerow([it] + [f"{rec[k]:.8g}" for k in LOSS_COLUMNS[1:]])
                    fh.flush()
                if it % self.tcfg.log_every == 0:
                    log.info("iter %d loss %.5f (%.2fs/iter)", it, rec["total"],
                             (time.perf_counter() - t0) / max(1, len(self.history)))
                if ckpt_path is not None and (it % self.tcfg.checkpoint_every == 0 or it == iterations):
                    save_checkpoint(ckpt_path, self.model, self.opt, it, run_config)
        finally:
            if fh is not None:
                fh.close()
        return self.history

    def resume(self, ckpt: dict):
        self.iteration = restore(ckpt, self.model, self.opt)


def truncate_loss_csv(path, iteration: int):
    """Drop rows past ``iteration`` so a resumed run continues without gaps or repeats."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        return
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= iteration]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


# ----------------------------------------------------------------------
# inference and evaluation
# ----------------------------------------------------------------------

def upscale_windows(model: DSMC, windows: np.ndarray) -> np.ndarray:
    """(N, T, 3, h, w) LR windows -> (N, 3, s*h, s*w).  Odd extents are
    edge-padded to even before the network and cropped afterwards."""
    s = model.cfg.scale
    h, w = windows.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        windows = np.pad(windows, [(0, 0)] * 3 + [(0, ph), (0, pw)], mode="edge")
    model.eval()
    with no_grad():
        out = model(Tensor(windows.astype(np.float32))).data
    return out[..., :s * h, :s * w]


def upscale_clip(model: DSMC, lr: VideoClip, frames=None, batch: int = 4) -> list:
    m = model.cfg.window // 2
    idx = list(range(len(lr))) if frames is None else list(frames)
    out = []
    for i in range(0, len(idx), batch):
        wins = np.stack([window_frames(lr, t, m).array() for t in idx[i:i + batch]])
        out.extend(upscale_windows(model, wins))
    return out


def evaluate(model: DSMC | None, hr_clips, scale: int = 4, frames=None) -> MetricReport:
    """PSNR/SSIM of the model (or of bicubic when ``model`` is None)."""
    rep = MetricReport()
    for hr in hr_clips:
        lr = make_lr(hr, scale)
        hr = lr.meta.get("hr_cropped", hr)
        idx = list(range(len(hr))) if frames is None else [t for t in frames if t < len(hr)]
        if model is None:
            srs = [bicubic_upscale(lr.frames[t], scale) for t in idx]
        else:
            srs = upscale_clip(model, lr, idx)
        for t, sr in zip(idx, srs):
            rep.add(hr.clip_id, t, sr, hr.frames[t])
    return rep


def count_params(model: DSMC) -> dict:
    return model.param_report()


def ablate(variants, model_cfg: ModelConfig, tcfg, train_clips, eval_clips, csv_path=None,
           featnet=None, frames=None) -> list:
    """Train one model per variant (tuple of ablation flags) and evaluate.

    Returns rows ``(name, psnr, ssim, d_psnr, d_ssim)``; deltas are relative
    to the first variant.
    """
    featnet = featnet or FeatureNet()
    dataset = ClipDataset(train_clips, model_cfg.scale, model_cfg.window // 2)
    rows, ref = [], None
    for flags in variants:
        flags = tuple(flags)
        name = "+".join(flags) if flags else "baseline"
        model = DSMC(model_cfg, flags)
        Trainer(model, dataset, tcfg, featnet).run(tcfg.iterations)
        p, s = evaluate(model, eval_clips, model_cfg.scale, frames).mean()
        ref = ref or (p, s)
        rows.append((name, p, s, p - ref[0], s - ref[1]))
        log.info("variant %s: %.3f dB / %.4f", name, p, s)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "psnr_db", "ssim", "delta_psnr_db", "delta_ssim"])
            for r in rows:
                w.writerow([r[0]] + [f"{v:.6f}" for v in r[1:]])
    return rows
