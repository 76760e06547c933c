"""Central-difference gradient checking."""

from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from loguru import logger

from . import functional as F
from .attention import AttnConfig, MSAWeights, TokenSequence, msa_block
from .boxes import BBox
from .detector import DetectorConfig, DetectorModel, detection_loss
from .rng import make_rng
from .tensor import Parameter, Tensor, no_grad, record_branches

SELECTIONS = ("random", "largest")


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    select: str = "random",
    skip_kinks: bool = False,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Per
    coordinate the error is ``|a - c| / max(|a|, |c|, 1e-8)``. With ``max_coords``
    set, that many coordinates per parameter are checked: sampled with ``rng``
    (``select="random"``) or those of largest analytic magnitude (``"largest"``).
    ``skip_kinks`` drops coordinates whose plus and minus evaluations land on different branches
    of a piecewise op.
    """
    report = gradient_report(f, params, eps, max_coords, rng, select, skip_kinks)
    return max(report.values(), default=0.0)


def _coordinates(
    grad: np.ndarray, max_coords: Optional[int], rng: np.random.Generator, select: str
) -> np.ndarray:
    size = grad.size
    if max_coords is None or max_coords >= size:
        return np.arange(size)
    if select == "largest":
        order = np.argsort(-np.abs(grad.reshape(-1)), kind="stable")
        return np.sort(order[:max_coords])
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def _evaluate(f: Callable[[], Tensor], skip_kinks: bool) -> Tuple[float, list]:
    if not skip_kinks:
        return f().item(), []
    with record_branches() as branches:
        value = f().item()
    return value, branches


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_report(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    select: str = "random",
    skip_kinks: bool = False,
) -> Dict[str, float]:
    """Per-parameter max relative error (see ``finite_diff_check``)."""
    if select not in SELECTIONS:
        raise ValueError(f"select must be one of {SELECTIONS}, got {select!r}")
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    rng = rng if rng is not None else np.random.default_rng(0)
    report: Dict[str, float] = {}
    for p in params:
        flat = p.data.reshape(-1)
        coords = _coordinates(analytic[p.name], max_coords, rng, select)
        worst = 0.0
        skipped = 0
        for idx in coords:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                plus, plus_branches = _evaluate(f, skip_kinks)
                flat[idx] = original - eps
                minus, minus_branches = _evaluate(f, skip_kinks)
            flat[idx] = original
            if skip_kinks and not _same_branches(plus_branches, minus_branches):
                skipped += 1
                continue
            central = (plus - minus) / (2.0 * eps)
            exact = analytic[p.name].reshape(-1)[idx]
            error = abs(exact - central) / max(abs(exact), abs(central), 1e-8)
            worst = max(worst, error)
        report[p.name] = worst
        logger.debug(
            f"gradcheck {p.name}: {len(coords) - skipped} coords, {skipped} across a kink, max rel error {worst:.3e}"
        )
        p.zero_grad()
    return report


# -- per-op suite ----------------------------------------------------------------

GradCase = Tuple[Callable[[], Tensor], List[Parameter]]


def _param(rng: np.random.Generator, name: str, *shape: int) -> Parameter:
    return Parameter(rng.normal(size=shape), name=name)


def _op_cases(rng: np.random.Generator) -> Dict[str, GradCase]:
    cases: Dict[str, GradCase] = {}

    x, w, b = _param(rng, "x", 2, 3, 6, 5), _param(rng, "w", 4, 3, 3, 3), _param(rng, "b", 4)
    weights = rng.normal(size=(2, 4, 3, 3))
    cases["conv2d"] = (lambda: (F.conv2d(x, w, b, stride=2, pad=1) * weights).sum(), [x, w, b])

    xt, wt, bt = _param(rng, "x", 2, 3, 3, 4), _param(rng, "w", 3, 2, 4, 4), _param(rng, "b", 2)
    weights_t = rng.normal(size=(2, 2, 6, 8))
    cases["conv2d_transposed"] = (
        lambda: (F.conv2d_transposed(xt, wt, bt, stride=2, pad=1) * weights_t).sum(),
        [xt, wt, bt],
    )

    xl, wl, bl = _param(rng, "x", 5, 4), _param(rng, "w", 3, 4), _param(rng, "b", 3)
    weights_l = rng.normal(size=(5, 3))
    cases["linear"] = (lambda: (F.linear(xl, wl, bl) * weights_l).sum(), [xl, wl, bl])

    xn, gamma, beta = _param(rng, "x", 4, 6), _param(rng, "gamma", 6), _param(rng, "beta", 6)
    weights_n = rng.normal(size=(4, 6))
    cases["layer_norm"] = (lambda: (F.layer_norm(xn, gamma, beta) * weights_n).sum(), [xn, gamma, beta])

    for name, op, shape in (
        ("softmax", lambda t: F.softmax(t, axis=-1), (3, 5)),
        ("leaky_relu", F.leaky_relu, (4, 5)),
        ("sigmoid", F.sigmoid, (4, 5)),
        ("upsample_nearest", F.upsample_nearest, (1, 2, 3, 3)),
    ):
        p = _param(rng, "x", *shape)
        out_shape = op(Tensor(p.data)).shape
        weights_e = rng.normal(size=out_shape)
        cases[name] = (lambda op=op, p=p, we=weights_e: (op(p) * we).sum(), [p])

    pred = _param(rng, "pred", 6, 4)
    target = rng.normal(size=(6, 4))
    cases["l1_loss"] = (lambda: F.l1_loss(pred, target), [pred])
    huber = _param(rng, "pred", 6, 4)
    huber_target = rng.normal(scale=2.0, size=(6, 4))
    cases["smooth_l1_loss"] = (lambda: F.smooth_l1_loss(huber, huber_target, beta=1.0), [huber])
    logits = _param(rng, "logits", 3, 7)
    labels = (rng.random((3, 7)) < 0.3).astype(np.float64)
    label_weights = np.where(labels == 1, 2.0, 1.0)
    cases["bce_with_logits"] = (lambda: F.binary_cross_entropy_with_logits(logits, labels, label_weights), [logits])
    return cases


def _msa_case(rng: np.random.Generator, literal: bool) -> GradCase:
    tokens, dim, heads = 6, 8, 2
    z = _param(rng, "z", tokens, dim)
    block = MSAWeights(
        *(Parameter(rng.normal(scale=dim ** -0.5, size=(dim, dim)), name=n) for n in ("w_q", "w_k", "w_v", "w_o")),
        gamma=Parameter(1.0 + 0.1 * rng.normal(size=dim), name="gamma"),
        beta=_param(rng, "beta", dim),
    )
    weights = rng.normal(size=(tokens, dim))

    def loss() -> Tensor:
        seq = TokenSequence(z, level=0, fold_factor=1, grid=(2, 3), channels=2, patch=(2, 2))
        return (msa_block(seq, block, heads=heads, literal_form=literal).tokens * weights).sum()

    return loss, [z, block.w_q, block.w_k, block.w_v, block.w_o, block.gamma, block.beta]


def _detector_case(rng: np.random.Generator, image_size: Tuple[int, int]) -> GradCase:
    """Detection loss of a tiny attention + FPN + head model on a two-image micro-batch."""
    attn = AttnConfig(base_channels=2, heads=8)
    config = DetectorConfig(fpn_channels=4, use_attention=True)
    model = DetectorModel(config, attn, image_size, rng)
    height, width = image_size
    images = Tensor(rng.random((2, 1, height, width)))
    boxes = [[BBox(10.0, 12.0, 14.0, 16.0)], [BBox(30.0, 40.0, 20.0, 18.0), BBox(4.0, 4.0, 8.0, 8.0)]]
    return (lambda: detection_loss(model, images, boxes, config)[0]), model.parameters()


def gradient_suite(
    eps: float = 1e-5,
    max_coords: Optional[int] = 24,
    seed: int = 0,
    image_size: Tuple[int, int] = (80, 64),
) -> Dict[str, float]:
    """Max relative gradient error per primitive and for the composed detector.

    Coordinates of larger tensors are the ``max_coords`` of largest analytic
    magnitude; coordinates straddling a leaky-ReLU, abs or smooth-L1 kink are skipped.
    """
    rng = make_rng(seed, "gradcheck")
    cases = _op_cases(rng)
    cases["msa_block_literal"] = _msa_case(rng, literal=True)
    cases["msa_block_residual"] = _msa_case(rng, literal=False)
    cases["attention_fpn_head"] = _detector_case(rng, image_size)

    table: Dict[str, float] = {}
    for name, (loss, params) in cases.items():
        table[name] = finite_diff_check(
            loss, params, eps, max_coords=max_coords, select="largest", skip_kinks=True
        )
        logger.info(f"gradcheck {name}: max rel error {table[name]:.3e}", extra={"op": name})
    return table
