"""Co-training loop: noisy forwards through both networks, CutMix routing
for model B, joint supervised + cross-pseudo-label objective, SGD updates.

Per step:
  1. uniform noise on every image in the batch;
  2. labeled sub-batch through both models -> supervised loss;
  3. model A sees the original unlabeled images (gradient pass), model B's
     forward on the originals only serves as A's pseudo-label source;
  4. model B's gradient pass runs on CutMix-mixed unlabeled pairs, and A's
     pseudo-labels are mixed with the same masks before supervising it;
  5. one SGD update per model plus the shared text projector.

All randomness flows through a single numpy generator stored in the state,
so checkpoints capture everything needed for bit-identical resumption.
"""

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .augment import sample_cutmix_mask, uniform_noise_like
from .config import TrainConfig, config_from_dict
from .dataio import DatasetSplit, make_batch
from .inference import SlidingWindowSpec, labels_from_probs, sliding_window_predict
from .losses import softmax_probs, supervised_loss, usl
from .metrics import dice_coeff
from .model import SegNet3D, init_parameters
from .textknow import TextProjector

LOG_COLUMNS = ("iter", "lr", "loss_sup", "loss_unsup", "loss_total", "val_dice")


@dataclass
class StepStats:
    iteration: int
    lr: float
    loss_sup: float
    loss_unsup: float
    loss_total: float
    captured: dict | None = None


@dataclass
class TrainState:
    model_a: SegNet3D
    model_b: SegNet3D
    projector: TextProjector
    pooled: torch.Tensor
    momenta: dict
    iteration: int
    rng: np.random.Generator
    loss_history: list = dc_field(default_factory=list)

    def named_groups(self):
        return {"model_a": self.model_a, "model_b": self.model_b,
                "projector": self.projector}


def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    """Constant, or polynomial decay lr0 * (1 - it/max_iters)^power."""
    if iteration > cfg.max_iters:
        raise ValueError(f"iteration {iteration} > max_iters {cfg.max_iters}")
    if cfg.lr_schedule == "constant":
        return cfg.lr0
    return cfg.lr0 * (1.0 - iteration / cfg.max_iters) ** cfg.lr_poly_power


def sgd_update(params: dict, grads: dict, buffers: dict, lr, momentum,
               weight_decay) -> dict:
    """v <- momentum*v + g + weight_decay*w;  w <- w - lr*v (in place)."""
    with torch.no_grad():
        for name, w in params.items():
            g = grads[name]
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient in parameter {name!r}")
            v = buffers[name]
            v.mul_(momentum).add_(g + weight_decay * w)
            w.sub_(lr * v)
    return params


def init_train_state(cfg: TrainConfig, pooled_embedding) -> TrainState:
    """Fresh models, momentum buffers and the training rng, all derived
    deterministically from cfg.seed."""
    seq = np.random.SeedSequence(cfg.seed)
    ss_a, ss_b, ss_p, ss_stream = seq.spawn(4)
    model_a = SegNet3D(num_classes=cfg.num_classes, base_channels=cfg.base_channels,
                       levels=cfg.levels)
    model_b = SegNet3D(num_classes=cfg.num_classes, base_channels=cfg.base_channels,
                       levels=cfg.levels)
    pooled = torch.as_tensor(np.asarray(pooled_embedding), dtype=torch.float32)
    projector = TextProjector(pooled.shape[0], model_a.bottleneck_channels)
    init_parameters(model_a, np.random.default_rng(ss_a))
    init_parameters(model_b, np.random.default_rng(ss_b))
    init_parameters(projector, np.random.default_rng(ss_p))
    momenta = {
        group: {name: torch.zeros_like(p) for name, p in mod.named_parameters()}
        for group, mod in (("model_a", model_a), ("model_b", model_b),
                           ("projector", projector))
    }
    return TrainState(model_a=model_a, model_b=model_b, projector=projector,
                      pooled=pooled, momenta=momenta, iteration=0,
                      rng=np.random.default_rng(ss_stream))


def _mix_pairs(stack: np.ndarray, masks) -> np.ndarray:
    """Round-robin CutMix: item i keeps its mask box, the rest comes from
    item (i+1) mod n."""
    n = stack.shape[0]
    out = np.empty_like(stack)
    for i, m in enumerate(masks):
        out[i] = np.where(m.mask.astype(bool), stack[i], stack[(i + 1) % n])
    return out


def _mix_pairs_torch(t: torch.Tensor, masks) -> torch.Tensor:
    n = t.shape[0]
    rows = []
    for i, m in enumerate(masks):
        sel = torch.as_tensor(m.mask.astype(bool))
        rows.append(torch.where(sel, t[i], t[(i + 1) % n]))
    return torch.stack(rows)


def train_step(state: TrainState, batch, cfg: TrainConfig, capture=False) -> StepStats:
    """One co-training step; advances the state in place."""
    rng = state.rng
    lr = lr_schedule(cfg, state.iteration)
    usl_kwargs = dict(cfg=cfg.usl, mode=cfg.unsup_mode,
                      multiclass_gates=cfg.multiclass_gates)

    lab_x = np.stack([v.voxels for v in batch.labeled_images])
    lab_y = np.stack([t.classes for t in batch.labeled_targets]).astype(np.int64)
    unl_x = np.stack([v.voxels for v in batch.unlabeled_images])
    if cfg.noise_amplitude > 0:
        lab_x = lab_x + uniform_noise_like(lab_x.shape, cfg.noise_amplitude, rng)
        unl_x = unl_x + uniform_noise_like(unl_x.shape, cfg.noise_amplitude, rng)

    use_cutmix = cfg.cutmix_ratio_max > 0
    masks = None
    if use_cutmix:
        spatial = unl_x.shape[1:]
        masks = [sample_cutmix_mask(spatial, (cfg.cutmix_ratio_min, cfg.cutmix_ratio_max), rng)
                 for _ in range(unl_x.shape[0])]

    t_lab_x = torch.from_numpy(np.ascontiguousarray(lab_x, dtype=np.float32))
    t_lab_y = torch.from_numpy(lab_y)
    t_unl_x = torch.from_numpy(np.ascontiguousarray(unl_x, dtype=np.float32))
    t_mix_x = _mix_pairs_torch(t_unl_x, masks) if use_cutmix else t_unl_x

    state.model_a.zero_grad(set_to_none=True)
    state.model_b.zero_grad(set_to_none=True)
    state.projector.zero_grad(set_to_none=True)
    z = state.projector(state.pooled) if cfg.beta_text > 0 else None

    n_lab = t_lab_x.shape[0]
    if cfg.unsup_weight > 0:
        logits_a = state.model_a(torch.cat([t_lab_x, t_unl_x]), z, cfg.beta_text)
        la_lab, la_unl = logits_a[:n_lab], logits_a[n_lab:]
        logits_b = state.model_b(torch.cat([t_lab_x, t_mix_x]), z, cfg.beta_text)
        lb_lab, lb_mix = logits_b[:n_lab], logits_b[n_lab:]

        if use_cutmix and cfg.cutmix_pseudo_source == "original":
            with torch.no_grad():
                lb_src = state.model_b(t_unl_x, z, cfg.beta_text)
        else:
            # cutmix disabled (mixed == original) or the flagged alternative
            # reading where B's mixed forward feeds A's supervision
            lb_src = lb_mix
        pl_b = softmax_probs(lb_src).detach()
        pl_a = softmax_probs(la_unl).detach()
        pl_a_target = _mix_pairs_torch(pl_a, masks) if use_cutmix else pl_a
        loss_unsup = usl(la_unl, pl_b, **usl_kwargs) + usl(lb_mix, pl_a_target, **usl_kwargs)
    else:
        la_lab = state.model_a(t_lab_x, z, cfg.beta_text)
        lb_lab = state.model_b(t_lab_x, z, cfg.beta_text)
        la_unl = lb_mix = pl_b = pl_a_target = None
        loss_unsup = torch.zeros(())

    loss_sup = supervised_loss(la_lab, lb_lab, t_lab_y, mode=cfg.sup_mode)
    total = loss_sup + cfg.unsup_weight * loss_unsup
    if not torch.isfinite(total):
        raise RuntimeError(f"non-finite loss at iteration {state.iteration}: "
                           f"sup={loss_sup.item()} unsup={float(loss_unsup)}")
    total.backward()

    for group, mod in state.named_groups().items():
        params = dict(mod.named_parameters())
        grads = {name: p.grad for name, p in params.items()}
        sgd_update(params, grads, state.momenta[group], lr, cfg.momentum,
                   cfg.weight_decay)

    stats = StepStats(
        iteration=state.iteration + 1,
        lr=lr,
        loss_sup=float(loss_sup.detach()),
        loss_unsup=float(loss_unsup.detach()) if torch.is_tensor(loss_unsup) else 0.0,
        loss_total=float(total.detach()),
    )
    if capture:
        stats.captured = {
            "labels": lab_y,
            "logits_a_labeled": la_lab.detach().numpy(),
            "logits_b_labeled": lb_lab.detach().numpy(),
            "logits_a_unlabeled": None if la_unl is None else la_unl.detach().numpy(),
            "logits_b_mixed": None if lb_mix is None else lb_mix.detach().numpy(),
            "pseudo_b": None if pl_b is None else pl_b.numpy(),
            "pseudo_a_target": None if pl_a_target is None else pl_a_target.numpy(),
            "masks": masks,
        }
    state.iteration += 1
    state.loss_history.append((stats.iteration, stats.loss_sup, stats.loss_unsup,
                               stats.loss_total))
    return stats


def make_model_forward(model: SegNet3D, z, beta_text):
    """Wrap a model as the patch->logits callable used by inference."""
    z_t = None if z is None else torch.as_tensor(np.asarray(z), dtype=torch.float32)

    def forward(patch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.array(patch, dtype=np.float32))
            return model(x.unsqueeze(0), z_t, beta_text).squeeze(0).numpy()

    return forward


def validation_dice(state: TrainState, cfg: TrainConfig, val_samples) -> float:
    """Mean foreground Dice of model A over held-out labeled volumes."""
    if not val_samples:
        return float("nan")
    with torch.no_grad():
        z = state.projector(state.pooled).numpy() if cfg.beta_text > 0 else None
    fwd = make_model_forward(state.model_a, z, cfg.beta_text)
    spec = SlidingWindowSpec(patch_size=cfg.patch_size,
                             stride=tuple(max(1, p // 2) for p in cfg.patch_size))
    scores = []
    for s in val_samples:
        pred = labels_from_probs(sliding_window_predict(fwd, s.image, spec))
        scores.append(dice_coeff(pred, s.label))
    return float(np.mean(scores))


def save_state(state: TrainState, cfg: TrainConfig, path) -> None:
    meta = {
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "pooled_dim": int(state.pooled.shape[0]),
    }
    ckpt_io.save_checkpoint(
        path,
        modules=state.named_groups(),
        momenta={f"momentum_{g}": bufs for g, bufs in state.momenta.items()},
        extra_arrays={"pooled": state.pooled.numpy()},
        meta=meta,
    )


def load_state(path):
    """Rebuild (state, cfg) from a checkpoint."""
    meta, arrays = ckpt_io.load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    state = init_train_state(cfg, arrays["pooled"])
    for group, mod in state.named_groups().items():
        tensors = ckpt_io.load_group_tensors(arrays, group)
        mod.load_state_dict({k: v for k, v in tensors.items()})
        for name, buf in state.momenta[group].items():
            buf.copy_(torch.as_tensor(arrays[f"momentum_{group}/{name}"]))
    state.iteration = int(meta["iteration"])
    rng_state = meta["rng_state"]
    # JSON roundtrips the nested state dict; numpy wants exact int types
    state.rng.bit_generator.state = rng_state
    return state, cfg


def train(cfg: TrainConfig, split: DatasetSplit, pooled_embedding, out_dir,
          val_samples=(), resume_from=None) -> TrainState:
    """Run max_iters co-training steps with CSV logging and periodic
    checkpoints; returns the final state. Resumable bit-identically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state, cfg = load_state(resume_from)
        log_mode = "a"
    else:
        state = init_train_state(cfg, pooled_embedding)
        log_mode = "w"

    log_path = out_dir / "train_log.csv"
    with open(log_path, log_mode, newline="") as logf:
        writer = csv.writer(logf)
        if log_mode == "w":
            writer.writerow(LOG_COLUMNS)
        while state.iteration < cfg.max_iters:
            batch = make_batch(split, cfg.batch_size, cfg.patch_size, state.rng,
                               patches_per_volume=cfg.patches_per_volume)
            stats = train_step(state, batch, cfg)
            it = stats.iteration
            val = ""
            if val_samples and (it % cfg.val_every == 0 or it == cfg.max_iters):
                val = f"{validation_dice(state, cfg, val_samples):.6f}"
            writer.writerow([it, f"{stats.lr:.10g}", f"{stats.loss_sup:.10g}",
                             f"{stats.loss_unsup:.10g}", f"{stats.loss_total:.10g}", val])
            if it % cfg.checkpoint_every == 0 and it != cfg.max_iters:
                save_state(state, cfg, out_dir / f"checkpoint_{it:06d}.ckpt")
    save_state(state, cfg, out_dir / "final.ckpt")
    return state
