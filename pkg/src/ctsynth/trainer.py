"""Three-stage adversarial training.

Stage 1 trains G1 against D2 on half-resolution pairs, stage 2 trains G2
(no fusion) against D1 at full resolution, stage 3 trains everything jointly
with DESUM and the beta-weighted feature matching loss. Epochs are counted
globally across stages, so the learning-rate schedule spans all three.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, TrainConfig, from_dict, to_dict
from .data import half_image_t, half_onehot_t, samples_to_tensors
from .discriminator import MultiResolutionDiscriminator
from .generator import GlobalLocalGenerator
from .losses import LossReport, cgan_loss_d, cgan_loss_g, dfm_loss, feature_matching, total_objective

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "g_adv", "d_adv", "dfm", "total", "alpha", "beta", "lr")


class NumericalAbort(RuntimeError):
    """A loss became NaN or infinite; diagnostics were dumped next to the run."""


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant for the first half of training, then linear decay reaching 0 at the last epoch."""
    E = cfg.epochs_total
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    half = E / 2.0
    if epoch < half:
        return cfg.lr
    return max(0.0, cfg.lr * (1.0 - (epoch - half + 1.0) / half))


def stage_bounds(cfg: TrainConfig) -> dict[int, tuple[int, int]]:
    s1, s2, s3 = cfg.stage_epochs
    return {1: (0, s1), 2: (s1, s1 + s2), 3: (s1 + s2, s1 + s2 + s3)}


def stage_of(epoch: int, cfg: TrainConfig) -> int:
    for stage, (lo, hi) in stage_bounds(cfg).items():
        if lo <= epoch < hi:
            return stage
    raise ValueError(f"epoch {epoch} outside schedule")


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def init_weights(module: nn.Module) -> None:
    """pix2pix initialisation: conv/linear weights ~ N(0, 0.02), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def _quarter(t, onehot=False):
    return half_onehot_t(half_onehot_t(t)) if onehot else half_image_t(half_image_t(t))


@dataclass
class StepRecord:
    step: int
    epoch: int
    stage: int
    lr: float
    report: LossReport

    def row(self) -> list:
        r = self.report
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))  # noqa: E731
        return [self.step, fmt(r.g_adv), fmt(r.d_adv), fmt(r.dfm), fmt(r.total), fmt(r.alpha), fmt(r.beta),
                repr(self.lr)]


class Trainer:
    """Owns G, D, both Adam optimisers and the loss log for one run."""

    def __init__(self, cfg: RunConfig, samples, out_dir=None):
        self.cfg = cfg
        tc = cfg.train
        set_deterministic(tc.deterministic)
        torch.manual_seed(tc.seed)
        self.G = GlobalLocalGenerator(cfg.generator)
        self.D = MultiResolutionDiscriminator(cfg.discriminator, cfg.generator.base_resolution)
        init_weights(self.G)
        init_weights(self.D)
        beta_params = list(self.D.beta_net.parameters())
        g_params = list(self.G.parameters())
        d_params = list(self.D.body_parameters())
        if cfg.discriminator.beta_owner == "generator":
            g_params += beta_params
        else:
            d_params += beta_params
        betas = (tc.adam_beta1, tc.adam_beta2)
        self.opt_g = torch.optim.Adam(g_params, lr=tc.lr, betas=betas)
        self.opt_d = torch.optim.Adam(d_params, lr=tc.lr, betas=betas)
        self.maps, self.images = samples_to_tensors(samples)
        self.epoch = 0
        self.global_step = 0
        self.history: list[StepRecord] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._log_fh = None

    # -- bookkeeping -----------------------------------------------------------

    @property
    def modules(self) -> dict[str, nn.Module]:
        return {"generator": self.G, "discriminator": self.D}

    @property
    def optimizers(self):
        return {"opt_g": self.opt_g, "opt_d": self.opt_d}

    def _meta(self) -> dict:
        return {"epoch": self.epoch, "global_step": self.global_step, "config": to_dict(self.cfg)}

    def save(self, path) -> Path:
        return ckpt.save_checkpoint(path, self.modules, self.optimizers, self._meta())

    @classmethod
    def from_checkpoint(cls, path, samples, out_dir=None, cfg: RunConfig | None = None) -> "Trainer":
        meta = ckpt.load_meta(path)
        if cfg is None:
            cfg = from_dict(RunConfig, meta["config"])
        tr = cls(cfg, samples, out_dir)
        ckpt.load_checkpoint(path, tr.modules, tr.optimizers)
        tr.epoch = int(meta["epoch"])
        tr.global_step = int(meta["global_step"])
        return tr

    def _log(self, rec: StepRecord) -> None:
        self.history.append(rec)
        if self.out_dir is None:
            return
        if self._log_fh is None:
            path = self.out_dir / "log.csv"
            new = not path.exists()
            path.parent.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(path, "a", newline="")
            if new:
                csv.writer(self._log_fh).writerow(LOG_COLUMNS)
        csv.writer(self._log_fh).writerow(rec.row())
        self._log_fh.flush()

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    def _abort(self, stage: int, values: dict) -> None:
        diag = {
            "stage": stage,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "losses": {k: float(v.detach()) if hasattr(v, "detach") else float(v) for k, v in values.items()},
            "param_norms": {n: float(p.detach().norm()) for n, p in
                            list(self.G.named_parameters()) + list(self.D.named_parameters())},
        }
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2))
        raise NumericalAbort(f"non-finite loss at step {self.global_step} (stage {stage}): {diag['losses']}")

    # -- data --------------------------------------------------------------------

    def batches(self, epoch: int):
        """Index batches for one epoch; order depends only on (seed, epoch)."""
        tc = self.cfg.train
        n = self.maps.shape[0]
        bs = min(tc.batch_size, n)
        steps = tc.steps_per_epoch or max(1, n // bs)
        rng = np.random.default_rng([tc.seed, epoch])
        order = np.concatenate([rng.permutation(n) for _ in range(math.ceil(steps * bs / n))])
        for s in range(steps):
            idx = torch.from_numpy(order[s * bs:(s + 1) * bs])
            yield self.maps[idx], self.images[idx]

    # -- steps -------------------------------------------------------------------

    def _d_step(self, d_loss) -> None:
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

    def _g_step(self, total) -> None:
        self.opt_g.zero_grad(set_to_none=True)
        _set_requires_grad(self.D.body_parameters(), False)
        try:
            total.backward()
        finally:
            _set_requires_grad(self.D.body_parameters(), True)
        self.opt_g.step()

    def _single_scale_step(self, stage, m, x, which, fake) -> LossReport:
        lam = self.cfg.train.lambda_fm
        r_grid, _ = self.D.d_forward(m, x, which)
        f_grid, _ = self.D.d_forward(m, fake.detach(), which)
        d_loss = cgan_loss_d([r_grid], [f_grid])
        if not torch.isfinite(d_loss):
            self._abort(stage, {"d_adv": d_loss})
        self._d_step(d_loss)

        with torch.no_grad():
            _, r_taps = self.D.d_forward(m, x, which)
        _set_requires_grad(self.D.body_parameters(), False)
        f_grid, f_taps = self.D.d_forward(m, fake, which)
        _set_requires_grad(self.D.body_parameters(), True)
        g_adv = cgan_loss_g([f_grid], self.cfg.train.saturating_g_loss)
        fm = feature_matching(r_taps, f_taps).mean()
        total = total_objective(g_adv, fm, lam)
        if not torch.isfinite(total):
            self._abort(stage, {"g_adv": g_adv, "dfm": fm, "total": total})
        self._g_step(total)
        return LossReport(g_adv.item(), d_loss.item(), fm.item(), total.item(), float("nan"), float("nan"))

    def step_stage1(self, m, x) -> LossReport:
        m_half, x_half = half_onehot_t(m), half_image_t(x)
        fake, _ = self.G.g1_forward(m_half)
        return self._single_scale_step(1, m_half, x_half, "half", fake)

    def step_stage2(self, m, x) -> LossReport:
        fake, _, _ = self.G.g2_forward(m, None)
        return self._single_scale_step(2, m, x, "full", fake)

    def _scale_inputs(self, m, x, fake):
        out = {}
        for scale in self.D.cfg.scales:
            if scale == "full":
                out[scale] = (m, x, fake)
            elif scale == "half":
                out[scale] = (half_onehot_t(m), half_image_t(x), half_image_t(fake))
            else:
                out[scale] = (_quarter(m, True), _quarter(x), _quarter(fake))
        return out

    def step_joint(self, m, x) -> LossReport:
        gcfg, dcfg, tc = self.cfg.generator, self.cfg.discriminator, self.cfg.train
        lam = tc.lambda_fm
        out = self.G(m)
        fake = out.image_full
        inputs = self._scale_inputs(m, x, fake)

        # discriminator update on detached fakes
        real_grids, fake_grids, real_taps_d = [], [], {}
        for scale, (ms, xs, fs) in inputs.items():
            rg, rt = self.D.d_forward(ms, xs, scale)
            fg, _ = self.D.d_forward(ms, fs.detach(), scale)
            real_grids.append(rg)
            fake_grids.append(fg)
            real_taps_d[scale] = rt
        d_loss = cgan_loss_d(real_grids, fake_grids)
        d_total = d_loss
        if dcfg.beta_owner == "discriminator" and dcfg.use_dfm and dcfg.fixed_beta is None \
                and dcfg.n_discriminators >= 2:
            with torch.no_grad():
                fake_taps_d = {s: self.D.d_forward(ms, fs.detach(), s)[1] for s, (ms, _, fs) in inputs.items()}
            beta_d = self._beta({s: [t.detach() for t in v] for s, v in real_taps_d.items()})
            d_total = d_loss - lam * self._dfm(
                {s: [t.detach() for t in v] for s, v in real_taps_d.items()}, fake_taps_d, beta_d)
        if not torch.isfinite(d_total):
            self._abort(3, {"d_adv": d_loss})
        self._d_step(d_total)

        # generator update
        with torch.no_grad():
            real_taps = {s: self.D.d_forward(ms, xs, s)[1] for s, (ms, xs, _) in inputs.items()}
        _set_requires_grad(self.D.body_parameters(), False)
        fake_out = {s: self.D.d_forward(ms, fs, s) for s, (ms, _, fs) in inputs.items()}
        g_adv = cgan_loss_g([g for g, _ in fake_out.values()], tc.saturating_g_loss)
        beta = None
        if dcfg.use_dfm:
            beta = self._beta(real_taps)
            dfm = self._dfm(real_taps, {s: t for s, (_, t) in fake_out.items()}, beta)
        else:
            dfm = torch.zeros((), dtype=fake.dtype)
        total = total_objective(g_adv, dfm, lam)
        if gcfg.supervise_g1_joint and out.image_half is not None and self.D.has("half"):
            ms, xs, _ = inputs["half"]
            gh, th = self.D.d_forward(ms, out.image_half, "half")
            total = total + cgan_loss_g([gh], tc.saturating_g_loss) + lam * feature_matching(real_taps["half"], th).mean()
        _set_requires_grad(self.D.body_parameters(), True)
        if not torch.isfinite(total):
            self._abort(3, {"g_adv": g_adv, "dfm": dfm, "total": total})
        self._g_step(total)

        alpha = out.alpha.detach().mean().item() if out.alpha is not None else float("nan")
        beta_v = beta.detach().mean().item() if beta is not None and dcfg.n_discriminators >= 2 else float("nan")
        return LossReport(g_adv.item(), d_loss.item(), dfm.item(), total.item(), alpha, beta_v)

    def _beta(self, real_taps):
        dcfg = self.D.cfg
        if dcfg.n_discriminators < 2:
            return None
        source = "full" if dcfg.beta_source == "d1" else "half"
        return self.D.beta_forward(real_taps[source][dcfg.beta_tap - 1])

    def _dfm(self, real_taps, fake_taps, beta):
        n = self.D.cfg.n_discriminators
        if n == 1:
            return feature_matching(real_taps["full"], fake_taps["full"]).mean()
        if n == 2:
            return dfm_loss(real_taps["full"], fake_taps["full"], real_taps["half"], fake_taps["half"], beta)
        fm1 = feature_matching(real_taps["full"], fake_taps["full"])
        coarse = 0.5 * (feature_matching(real_taps["half"], fake_taps["half"])
                        + feature_matching(real_taps["quarter"], fake_taps["quarter"]))
        return (beta * coarse + (1.0 - beta) * fm1).mean()

    # -- schedule ----------------------------------------------------------------

    def stage_runnable(self, stage: int) -> bool:
        if stage == 1:
            return self.cfg.generator.n_generators >= 2 and self.D.has("half")
        return True

    def train_epoch(self, epoch: int) -> None:
        stage = stage_of(epoch, self.cfg.train)
        lr = lr_at(epoch, self.cfg.train)
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr
        step_fn = {1: self.step_stage1, 2: self.step_stage2, 3: self.step_joint}[stage]
        self.G.train()
        self.D.train()
        if self.stage_runnable(stage):
            for m, x in self.batches(epoch):
                report = step_fn(m, x)
                self.global_step += 1
                self._log(StepRecord(self.global_step, epoch, stage, lr, report))
        else:
            log.warning("stage %d skipped for this configuration (epoch %d)", stage, epoch)
        self.epoch = epoch + 1
        every = self.cfg.train.checkpoint_every
        if self.out_dir is not None and every and self.epoch % every == 0:
            self.save(self.out_dir / "checkpoints" / f"epoch_{self.epoch:03d}")

    def run_stage(self, stage: int) -> None:
        lo, hi = stage_bounds(self.cfg.train)[stage]
        self.epoch = max(self.epoch, lo)
        for epoch in range(self.epoch, hi):
            self.train_epoch(epoch)
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoints" / f"stage{stage}")

    def run(self, stages=(1, 2, 3)):
        for st in stages:
            self.run_stage(st)
        return self


def train_stage1(data, cfg: RunConfig, out_dir=None) -> Trainer:
    tr = Trainer(cfg, data, out_dir)
    tr.run_stage(1)
    return tr


def train_stage2(data, cfg: RunConfig, out_dir=None, resume=None) -> Trainer:
    tr = Trainer.from_checkpoint(resume, data, out_dir, cfg) if resume else Trainer(cfg, data, out_dir)
    tr.run_stage(2)
    return tr


def train_stage3_joint(data, cfg: RunConfig, out_dir=None, resume=None) -> Trainer:
    tr = Trainer.from_checkpoint(resume, data, out_dir, cfg) if resume else Trainer(cfg, data, out_dir)
    tr.run_stage(3)
    return tr


def validate_stage_arg(stage: str) -> tuple[int, ...]:
    if stage == "all":
        return (1, 2, 3)
    if stage in ("1", "2", "3"):
        return (int(stage),)
    raise ConfigError(f"--stage: expected 1, 2, 3 or all, got {stage!r}")
