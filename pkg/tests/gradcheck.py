"""Central finite-difference checks shared by the module tests and the acceptance suite."""
import torch
import torch.nn.functional as F

from agfas.dgtrain import DomainDiscriminator, FASConfig, TrainBatch, adv_loss, cls_loss, total_loss, triplet_loss
from agfas.diffusion import NoisePredictor, dfg_loss, make_schedule
from agfas.oanet import OANet, OANetConfig

TINY_OA = OANetConfig(image_size=8, patch=4, d_model=8, depth=1, heads=2, cross_heads=2, mlp_ratio=1.0,
                      cue_grid=2, d_cue=4, cue_layers=2)


@torch.no_grad()
def central_diff(f, params, h: float = 1e-6) -> torch.Tensor:
    """Numeric gradient of the scalar ``f()`` w.r.t. every element of ``params``, flattened."""
    out = []
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(f())
            flat[i] = old - h
            dn = float(f())
            flat[i] = old
            out.append((up - dn) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    return float((analytic - numeric).norm() / numeric.norm())


def _flat_grads(loss, params):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).flatten() for p, g in zip(params, grads)])


def dfg_loss_check(seed: int = 0) -> tuple[float, int]:
    """Relative error of the predictor-parameter gradient of dfg_loss, and the parameter count."""
    torch.manual_seed(seed)
    p = NoisePredictor(base=2, emb_dim=2, k_id=1, d_id=2, heads=1, T=10).double()
    # the identity paths start at zero; give them weight so their gradients are exercised too
    with torch.no_grad():
        for m in (p.id_proj, p.mid_attn.attn.out_proj, p.id_map):
            m.weight.normal_(0, 0.5)
    sched = make_schedule(10, 0.01, 0.2)
    g = torch.Generator().manual_seed(5 + seed)
    z0 = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    tok = torch.randn(2, 1, 2, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 8])
    params = list(p.parameters())

    def f():
        return dfg_loss(z0, t, tok, eps, p, sched)

    analytic = _flat_grads(f(), params)
    return rel_error(analytic, central_diff(f, params)), analytic.numel()


def tiny_batch(seed: int = 1) -> TrainBatch:
    g = torch.Generator().manual_seed(seed)
    n = 8
    return TrainBatch(
        images=torch.rand(n, 3, 8, 8, generator=g, dtype=torch.float64),
        cues=torch.randn(n, 3, 8, 8, generator=g, dtype=torch.float64),
        labels=torch.tensor([0, 0, 0, 0, 1, 1, 1, 1]),
        domain_ids=torch.tensor([0, 1, 2, 0, 0, 1, 2, 1]),
        source_flags=torch.zeros(n, dtype=torch.long),
    )


def composite_loss_check(seed: int = 0) -> tuple[float, float]:
    """Relative gradient errors of the composite DG loss for the discriminator and the extractor.

    The discriminator is compared with plain finite differences of the loss.
    The reversal layer flips the sign the extractor sees, so the extractor is
    compared with finite differences of cls + w_trip*trip - lambda*w_adv*adv.
    """
    torch.manual_seed(seed)
    model = OANet(TINY_OA).double().eval()
    disc = DomainDiscriminator(8, [0, 1, 2], hidden=6).double()
    with torch.no_grad():
        for p in model.cross_out_params():
            p.normal_(0, 0.3)  # exercise the cue path too
    batch = tiny_batch(1 + seed)
    cfg = FASConfig(w_adv=0.5, w_trip=1.0, margin=0.3)
    m_params, d_params = list(model.parameters()), list(disc.parameters())

    def f():
        return total_loss(model, disc, batch, cfg)[0]

    def reference():
        out = model(batch.images, batch.cues)
        lc = cls_loss(out.logits, batch.labels)
        la = adv_loss(out.feature, batch.domain_ids, batch.labels, disc, reverse=False)
        lt = triplet_loss(out.feature, batch.labels, batch.domain_ids, cfg.margin)
        return lc + cfg.w_trip * lt - disc.grl_lambda * cfg.w_adv * la

    analytic = _flat_grads(f(), m_params + d_params)
    n_model = sum(p.numel() for p in m_params)
    rel_disc = rel_error(analytic[n_model:], central_diff(f, d_params))
    rel_model = rel_error(analytic[:n_model], central_diff(reference, m_params))
    return rel_disc, rel_model


def w_out_check(init: str = "zero", seed: int = 0) -> float:
    """Relative gradient error of the first cross-attention output projection under a CE loss."""
    torch.manual_seed(seed)
    m = OANet(TINY_OA).double().eval()
    g = torch.Generator().manual_seed(3 + seed)
    x = torch.rand(3, 3, 8, 8, generator=g, dtype=torch.float64)
    c = torch.randn(3, 3, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    w = m.cross_out_params()[0]
    if init == "random":
        with torch.no_grad():
            w.copy_(0.3 * torch.randn(w.shape, generator=g, dtype=torch.float64))

    def f():
        return F.cross_entropy(m(x, c).logits, y)

    analytic = _flat_grads(f(), [w])
    return rel_error(analytic, central_diff(f, [w]))
