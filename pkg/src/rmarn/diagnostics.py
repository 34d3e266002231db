"""Staged finite-difference gradient checks of the whole model at double precision."""
from dataclasses import dataclass

import numpy as np

from . import afr, rls, simhead
from .model import RMARN, ModelConfig
from .numcore import Tensor, check_gradients, parameter, scalar_probe
from .objective import LossConfig, contrastive_loss

STAGES = ("afr_encode", "riemann_attention_map", "lrf_scp", "gps_fuse", "contrastive_loss", "end_to_end")
THRESHOLD = 1e-4

# tiny double-precision model; large enough to exercise every code path
GRADCHECK_CONFIG = dict(text_dim=5, point_dim=4, d_model=8, nhead=2, sa_layers=2, manifolds=2, rank=3,
                        dropout=0.0)


@dataclass
class StageResult:
    stage: str
    max_rel_error: float
    worst_param: str | None
    n_checked: int
    threshold: float = THRESHOLD

    @property
    def passed(self):
        return self.max_rel_error < self.threshold

    def to_dict(self):
        return {"stage": self.stage, "max_rel_error": self.max_rel_error, "worst_param": self.worst_param,
                "n_checked": self.n_checked, "passed": self.passed}


def safe_lambda(values, target=0.1):
    """A threshold near ``target`` at the middle of the widest gap between nearby ``|values|``.

    Finite differences straddling a soft-threshold kink are meaningless, so
    the checked lambda keeps clear of every kink.
    """
    mags = np.sort(np.abs(np.ravel(values)))
    near = mags[(mags > target / 4) & (mags < target * 4)]
    pts = np.concatenate([[target / 4], near, [target * 4]])
    i = int(np.argmax(np.diff(pts)))
    return float(0.5 * (pts[i] + pts[i + 1]))


def _tensors(rng, *shapes, names=None):
    return [parameter(rng.standard_normal(s), name=n) for s, n in zip(shapes, names or [None] * len(shapes))]


def _stage_afr(rng, model, hook):
    cfg = model.config
    x = rng.standard_normal((4, cfg.text_dim))
    probe = Tensor(rng.standard_normal((4, cfg.d_model)))
    params = model.params.text_afr

    def f():
        return (afr.encode(x, params, cfg.nhead) * probe).sum()

    return check_gradients(f, params.named("text_afr"), grad_hook=hook)


def _stage_map(rng, model, hook):
    d = model.config.d_model
    t, p = _tensors(rng, (3, d), (4, d), names=("t", "p"))
    bundle = model.params.bundle
    probe = Tensor(rng.standard_normal((bundle.k, 3, 4)))

    def f():
        return (rls.riemann_attention_map(t, p, bundle).values * probe).sum()

    return check_gradients(f, {**bundle.named("rls"), "t": t, "p": p}, grad_hook=hook)


def _stage_head(rng, model, hook):
    head = model.params.head
    m = parameter(rng.standard_normal((head.k, 4, 5)), name="map")
    head.set_lambda(safe_lambda((head.lrf_D.data @ m.data.reshape(head.k, -1))))
    named = {k: v for k, v in head.named("head").items() if "fuse" not in k}

    def f():
        return simhead.scp(simhead.lrf(m, head), head)

    return check_gradients(f, {**named, "map": m}, grad_hook=hook)


def _stage_gps(rng, model, hook):
    d = model.config.d_model
    t, p = _tensors(rng, (3, d), (5, d), names=("t", "p"))
    s_scp = parameter(rng.standard_normal(()), name="s_scp")
    head = model.params.head

    def f():
        return simhead.fuse(s_scp, simhead.gps(t, p), head)

    named = {"t": t, "p": p, "s_scp": s_scp, "head.fuse_w_scp": head.fuse_w_scp,
             "head.fuse_w_gps": head.fuse_w_gps}
    return check_gradients(f, named, grad_hook=hook)


def _stage_loss(rng, model, hook):
    s = parameter(rng.standard_normal((4, 4)), name="S")
    cfg = LossConfig(0.5, 0.7, 0.6, 0.4)
    return check_gradients(lambda: contrastive_loss(s, cfg), {"S": s}, grad_hook=hook)


def _stage_end_to_end(rng, model, hook):
    cfg = model.config
    texts = [afr.FeatureSequence(rng.standard_normal((n, cfg.text_dim)), "text") for n in (2, 4, 3)]
    points = [afr.FeatureSequence(rng.standard_normal((n, cfg.point_dim)), "pointcloud") for n in (5, 3, 4)]
    # keep the filter threshold clear of kinks for this batch's maps
    with_lrf = cfg.use_rls and cfg.use_lrf
    if with_lrf:
        t_enc, t_len = model.encode(texts, "text")
        p_enc, p_len = model.encode(points, "pointcloud")
        grid = rls.riemann_attention_grid(t_enc, p_enc, model.params.bundle).data
        mixed = np.einsum("oc,ijcab->ijoab", model.params.head.lrf_D.data, grid)
        model.params.head.set_lambda(safe_lambda(mixed))

    def f():
        return contrastive_loss(model.similarity(texts, points), LossConfig(0.5, 0.5))

    return check_gradients(f, model.named_parameters(), max_coords=6, rng=rng, grad_hook=hook)


_RUNNERS = dict(zip(STAGES, (_stage_afr, _stage_map, _stage_head, _stage_gps, _stage_loss, _stage_end_to_end)))


def run_gradcheck(seed=0, inject=None, threshold=THRESHOLD, stages=STAGES):
    """Run every stage; ``inject`` names a stage whose first analytic gradient is doubled."""
    results = []
    for i, stage in enumerate(stages):
        rng = np.random.default_rng([seed, i])
        model = RMARN.initialize(ModelConfig(**GRADCHECK_CONFIG), rng, dtype=np.float64)
        hook = None
        if stage == inject:
            first = []

            def hook(name, g, first=first):
                if not first:
                    first.append(name)
                    return 2.0 * g
                return g

        rep = _RUNNERS[stage](rng, model, hook)
        results.append(StageResult(stage, rep.max_rel_error, rep.worst_param, rep.n_checked, threshold))
    return results


__all__ = ["STAGES", "StageResult", "run_gradcheck", "safe_lambda", "scalar_probe"]
