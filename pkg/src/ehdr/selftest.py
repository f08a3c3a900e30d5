"""Built-in invariant suites, run by ``ehdr selftest``.

Each suite is deterministic (fixed seeds) so two runs print the same
transcript. ``fault="conv"`` corrupts the kernel handed to the fast
convolution to prove the oracle suite can fail.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import blocks as B
from .analyzer import AttentionDims, count_model, count_msa
from .colorspace import MODES, rgb_to_ycbcr, ycbcr_to_rgb
from .model import ModelConfig, build_model, parameter_count
from .tensor import ConvSpec, conv2d, conv2d_oracle, count_macs
from .weightfile import decode_weights, encode_weights

GOLDEN_WEIGHTS = bytes.fromhex(
    "454844525700" "0100" "01000000"  # magic, version 1, one tensor
    "0100" "77" "02" "02000000" "02000000"  # name "w", rank 2, 2 x 2
    "0000803f" "000000c0" "0000003f" "00004040"  # 1.0 -2.0 0.5 3.0
)
GOLDEN_VALUES = np.array([[1.0, -2.0], [0.5, 3.0]], np.float32)


def relative_error(got, want) -> float:
    scale = max(float(np.max(np.abs(want))), 1e-12)
    return float(np.max(np.abs(np.asarray(got, np.float64) - want))) / scale


def random_conv_case(rng: np.random.Generator):
    """A random grouped/dilated/strided conv small enough for the oracle."""
    groups = int(rng.choice([1, 2, 4]))
    if rng.random() < 0.25:  # depthwise
        cin = cout = groups
    else:
        cin = groups * int(rng.integers(1, 8 // groups + 1))
        cout = groups * int(rng.integers(1, 8 // groups + 1))
    dil = int(rng.choice([1, 3, 5]))
    k = int(rng.choice([1, 3, 3, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, dil + 1)) if k == 3 else 0
    span = dil * (k - 1) + 1
    h = int(rng.integers(max(1, span - 2 * pad), 17))
    w = int(rng.integers(max(1, span - 2 * pad), 17))
    spec = ConvSpec(cout, cin, k, stride, dil, groups, pad)
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, h, w)).astype(np.float32)
    wt = rng.standard_normal(spec.weight_shape).astype(np.float32)
    bias = rng.standard_normal(cout).astype(np.float32) if rng.random() < 0.5 else None
    return x, wt, bias, spec


def suite_conv_oracle(fault=None):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        x, wt, bias, spec = random_conv_case(rng)
        fast_w = wt.copy()
        if fault == "conv":
            fast_w.flat[0] += 1.0
        worst = max(worst, relative_error(conv2d(x, fast_w, bias, spec), conv2d_oracle(x, wt, bias, spec)))
    return worst <= 1e-5, f"50 cases, max rel err {worst:.2e}"


def _random_attention(rng, c, heads):
    s = 1.0 / math.sqrt(c)
    return B.AttentionParams(
        rng.uniform(-s, s, (3 * c, c)).astype(np.float32), np.zeros(3 * c, np.float32),
        rng.uniform(-s, s, (c, c)).astype(np.float32), np.zeros(c, np.float32), heads,
    )


def suite_msa_count(fault=None):
    rng = np.random.default_rng(5)
    cases = 0
    for c in (4, 8, 16):
        p = _random_attention(rng, c, heads=2)
        for h in range(1, 9):
            for w in range(1, 9):
                tokens = rng.standard_normal((h * w, c)).astype(np.float32)
                with count_macs() as counter:
                    B.msa_forward(tokens, p)
                if counter.macs != count_msa(AttentionDims(h, w, c)).macs:
                    return False, f"mismatch at h={h} w={w} C={c}: counted {counter.macs}"
                cases += 1
    return True, f"{cases} grids exact"


def _random_iaaf(rng, c):
    def conv_w(o, i):
        s = 1.0 / math.sqrt(9 * i)
        return rng.uniform(-s, s, (o, i, 3, 3)).astype(np.float32), rng.uniform(-s, s, o).astype(np.float32)

    return B.IAAFParams(*conv_w(c, 2 * c), *conv_w(c, c), *conv_w(c, c), *conv_w(c, c))


def suite_iaaf_algebra(fault=None):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        c = int(rng.choice([2, 4, 8]))
        f1, f2 = (rng.uniform(-1, 1, (1, c, 8, 8)).astype(np.float32) for _ in range(2))
        p = _random_iaaf(rng, c)
        err = np.abs(B.iaaf_fuse(f1, f2, p) + B.iaaf_intersection(f1, f2, p) - (f1 + f2)).max()
        worst = max(worst, float(err))
    zero = B.IAAFParams(*(np.zeros_like(a) for a in vars(_random_iaaf(rng, 4)).values()))
    f1, f2 = (rng.uniform(-1, 1, (1, 4, 8, 8)).astype(np.float32) for _ in range(2))
    exact = np.array_equal(B.iaaf_fuse(f1, f2, zero), f1 + f2)
    return worst <= 1e-6 and exact, f"max residual {worst:.2e}, zero-intersection exact={exact}"


def suite_dyt_bounds(fault=None):
    rng = np.random.default_rng(11)
    ok = True
    for _ in range(1000):
        c = 4
        p = B.DyTParams(np.array([rng.uniform(0.05, 3.0)], np.float32),
                        rng.uniform(0.1, 2.0, c).astype(np.float32), rng.uniform(-1, 1, c).astype(np.float32))
        x = rng.uniform(-10, 10, (6, c)).astype(np.float32)
        y = B.dyt_forward(x, p)
        # the final float32 add may round the output by one ulp past the bound
        slack = np.spacing(np.abs(y)).astype(np.float64)
        ok &= bool(np.all(np.abs(y.astype(np.float64) - p.beta) <= np.abs(p.gamma) + slack))
        xs = np.sort(x, axis=0)
        ok &= bool(np.all(np.diff(B.dyt_forward(xs, p), axis=0) >= 0))
        bumped = x.copy()
        bumped[2, 1] += 0.5
        diff = B.dyt_forward(bumped, p) != y
        diff[2, 1] = False
        ok &= not diff.any()
    return ok, "1000 samples: bound, monotonicity, locality"


def suite_ycbcr_roundtrip(fault=None):
    rng = np.random.default_rng(13)
    px = rng.random((3, 1, 1000)).astype(np.float32)
    worst = max(float(np.abs(ycbcr_to_rgb(rgb_to_ycbcr(px, co), co) - px).max()) for co in MODES.values())
    return worst <= 1e-5, f"1000 pixels x {len(MODES)} modes, max err {worst:.2e}"


def suite_weight_roundtrip(fault=None):
    cfg = ModelConfig(base_channels=4, embed_dim=8, num_blocks=1, heads=2)
    _, ws = build_model(cfg, 3)
    back = decode_weights(encode_weights(ws))
    same = list(back) == list(ws) and all(np.array_equal(back[k], ws[k]) and back[k].dtype == ws[k].dtype for k in ws)
    golden = decode_weights(GOLDEN_WEIGHTS)
    golden_ok = list(golden) == ["w"] and np.array_equal(golden["w"], GOLDEN_VALUES)
    counts = parameter_count(ws) == count_model(cfg, 16, 16).params
    return same and golden_ok and counts, f"{len(ws)} tensors bit-exact={same}, golden={golden_ok}, param totals={counts}"


SUITES = [
    ("conv-oracle", suite_conv_oracle),
    ("msa-count", suite_msa_count),
    ("iaaf-algebra", suite_iaaf_algebra),
    ("dyt-bounds", suite_dyt_bounds),
    ("ycbcr-roundtrip", suite_ycbcr_roundtrip),
    ("weight-roundtrip", suite_weight_roundtrip),
]


def run_selftest(out, err=None, fault=None) -> bool:
    """Run every suite, writing one ``PASS``/``FAIL`` line each to ``out``."""
    all_ok = True
    for name, fn in SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(fault)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<18} {detail}", file=out)
        if err is not None:
            print(f"{name}: {time.perf_counter() - t0:.2f}s", file=err)
    return all_ok
