import math

import numpy as np
import pytest
import torch

from vascldm import numcore as nc

F64 = torch.float64
H = 1e-5
# Denominators below this floor fall back to absolute error. Round-off in the
# central difference is about 1e-16 * |loss| / h ~ 1e-9, so gradients that are
# structurally zero (key bias under softmax, conv bias ahead of a norm) need it.
REL_FLOOR = 1e-4


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def randomize(ps: nc.ParamSet, seed: int) -> None:
    g = np.random.default_rng(seed)
    ps.load_numpy({k: g.normal(0, 0.5, size=tuple(v.shape)) for k, v in ps.items()})


def fd_check(fn, ps: nc.ParamSet, x: torch.Tensor, seed: int = 0) -> float:
    """Central-difference oracle over every parameter entry and every input entry.

    The scalar loss is sum(w * fn(x)) with a fixed random weighting w.
    """
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    w = torch.as_tensor(np.random.default_rng(seed + 1).normal(size=tuple(out.shape)), dtype=F64)

    def loss_value() -> float:
        with torch.no_grad():
            return float((w * fn(x)).sum())

    loss = (w * fn(x)).sum()
    grads = nc.grad(loss, ps) if len(ps) else {}
    gx = torch.autograd.grad((w * fn(x)).sum(), x)[0]
    worst = 0.0
    with torch.no_grad():
        for name, p in list(ps.items()) + [("input", x)]:
            analytic = (gx if name == "input" else grads[name]).numpy().ravel()
            flat = p.view(-1)
            numeric = np.empty(flat.numel())
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + H
                up = loss_value()
                flat[i] = old - H
                down = loss_value()
                flat[i] = old
                numeric[i] = (up - down) / (2 * H)
            worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _x(shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape), dtype=F64)


LAYER_CASES = {
    "dense": (lambda ps: nc.init_dense(ps, "l", 5, 3), (2, 4, 5), {}),
    "conv2d": (lambda ps: nc.init_conv(ps, "l", 2, 3), (2, 2, 5, 5), {}),
    "down2": (lambda ps: nc.init_conv(ps, "l", 2, 3), (1, 2, 6, 6), {}),
    "up2": (lambda ps: nc.init_conv(ps, "l", 2, 2), (1, 2, 3, 3), {}),
    "groupnorm": (lambda ps: nc.init_groupnorm(ps, "l", 8), (2, 8, 3, 3), {}),
    "silu": (lambda ps: None, (3, 7), {}),
    "mha": (lambda ps: nc.init_mha(ps, "l", 8), (2, 5, 8), {"heads": 4}),
    "resblock": (lambda ps: nc.init_resblock(ps, "l", 8, 16), (1, 8, 4, 4), {}),
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(kind):
    init, shape, kwargs = LAYER_CASES[kind]
    ps = nc.ParamSet(seed=3, dtype=F64)
    init(ps)
    randomize(ps, 11)
    scope = ps.scope("l") if len(ps) else None
    err = fd_check(lambda x: nc.layer_forward(kind, scope, x, **kwargs), ps, _x(shape))
    assert err < 1e-4, f"{kind}: max relative error {err:.2e}"


def test_resblock_identity_skip_gradients():
    ps = nc.ParamSet(seed=4, dtype=F64)
    nc.init_resblock(ps, "l", 8, 8)
    randomize(ps, 12)
    assert "l.proj.w" not in ps.tensors
    assert fd_check(lambda x: nc.resblock(ps.scope("l"), x), ps, _x((1, 8, 3, 3))) < 1e-4


def composite_net(ps: nc.ParamSet):
    nc.init_conv(ps, "conv", 1, 8)
    nc.init_resblock(ps, "rb", 8, 8)
    nc.init_groupnorm(ps, "norm", 8)
    nc.init_mha(ps, "attn", 8)
    nc.init_conv(ps, "down", 8, 8)
    nc.init_conv(ps, "up", 8, 8)
    nc.init_dense(ps, "head", 8, 2)

    def fwd(x):
        h = nc.conv2d(ps.scope("conv"), x)
        h = nc.resblock(ps.scope("rb"), h, bias=torch.full((x.shape[0], 8), 0.3, dtype=x.dtype))
        h = h + nc.mha2d(ps.scope("attn"), nc.groupnorm(ps.scope("norm"), h), 4)
        h = nc.up2(ps.scope("up"), nc.down2(ps.scope("down"), h))
        return nc.dense(ps.scope("head"), nc.silu(h).mean(dim=(2, 3)))

    return fwd


def test_composite_network_gradients():
    ps = nc.ParamSet(seed=5, dtype=F64)
    fwd = composite_net(ps)
    randomize(ps, 13)
    assert fd_check(fwd, ps, _x((2, 1, 4, 4))) < 1e-4


def test_structurally_zero_gradients():
    # softmax is shift invariant along keys; groupnorm removes a per-channel bias
    ps = nc.ParamSet(seed=5, dtype=F64)
    fwd = composite_net(ps)
    randomize(ps, 13)
    g = nc.grad(fwd(_x((2, 1, 4, 4))).pow(2).sum(), ps)
    assert g["attn.k.b"].abs().max() < 1e-12
    assert g["rb.conv1.b"].abs().max() < 1e-12


# --- forward examples -----------------------------------------------------------------


def test_silu_values():
    x = torch.tensor([0.0, 1.0], dtype=F64)
    out = nc.layer_forward("silu", None, x)
    assert out[0] == 0.0
    assert float(out[1]) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)


def test_mha_single_token_identity():
    ps = nc.ParamSet(dtype=F64)
    nc.init_mha(ps, "a", 6)
    ps.load_numpy({k: (np.eye(6) if k.endswith(".w") else np.zeros(6)) for k in ps})
    tok = _x((1, 1, 6))
    assert torch.equal(nc.mha(ps.scope("a"), tok, heads=1), tok)


def test_conv_ones_oracle():
    ps = nc.ParamSet(dtype=F64)
    nc.init_conv(ps, "c", 1, 1)
    ps.load_numpy({"c.w": np.ones((1, 1, 3, 3)), "c.b": np.zeros(1)})
    out = nc.conv2d(ps.scope("c"), torch.ones(1, 1, 5, 5, dtype=F64))[0, 0].detach().numpy()
    # direct summation oracle
    padded = np.pad(np.ones((5, 5)), 1)
    oracle = np.array([[padded[i : i + 3, j : j + 3].sum() for j in range(5)] for i in range(5)])
    assert np.array_equal(out, oracle)
    assert out[2, 2] == 9 and out[0, 0] == 4


def test_shape_algebra():
    ps = nc.ParamSet(dtype=F64)
    nc.init_conv(ps, "c", 3, 4)
    x = _x((2, 3, 8, 8))
    assert nc.conv2d(ps.scope("c"), x).shape == (2, 4, 8, 8)
    assert nc.down2(ps.scope("c"), x).shape == (2, 4, 4, 4)
    assert nc.up2(ps.scope("c"), x).shape == (2, 4, 16, 16)


@pytest.mark.parametrize(
    "kind,init,shape",
    [
        ("dense", lambda ps: nc.init_dense(ps, "l", 5, 3), (2, 4)),
        ("conv2d", lambda ps: nc.init_conv(ps, "l", 2, 3), (1, 3, 4, 4)),
        ("groupnorm", lambda ps: nc.init_groupnorm(ps, "l", 8), (1, 4, 2, 2)),
        ("mha", lambda ps: nc.init_mha(ps, "l", 6), (1, 3, 6)),
        ("down2", lambda ps: nc.init_conv(ps, "l", 2, 2), (1, 2, 5, 5)),
    ],
)
def test_shape_errors_are_explicit(kind, init, shape):
    ps = nc.ParamSet(dtype=F64)
    init(ps)
    with pytest.raises(nc.ShapeError, match="expected|divisible|even"):
        nc.layer_forward(kind, ps.scope("l"), _x(shape))


def test_unknown_layer_kind():
    with pytest.raises(ValueError):
        nc.layer_forward("pool", None, _x((1, 1)))


def test_finite_checks():
    with pytest.raises(FloatingPointError):
        nc.silu(torch.tensor([float("nan")]))


# --- parameters, gradients, optimizer ------------------------------------------------------


def test_glorot_bounds_and_seed():
    a, b = nc.ParamSet(seed=9), nc.ParamSet(seed=9)
    nc.init_dense(a, "d", 30, 20)
    nc.init_dense(b, "d", 30, 20)
    w = a["d.w"].detach().numpy()
    assert np.abs(w).max() <= math.sqrt(6 / 50)
    assert np.array_equal(w, b["d.w"].detach().numpy())
    assert np.all(a["d.b"].detach().numpy() == 0)
    with pytest.raises(KeyError):
        nc.init_dense(a, "d", 1, 1)


def test_grad_of_sum_of_squares():
    ps = nc.ParamSet(dtype=F64)
    ps.glorot("p", (3, 4), 3, 4)
    ps.zeros("unused", (2,))
    g = nc.grad((ps["p"] ** 2).sum(), ps)
    assert torch.allclose(g["p"], 2 * ps["p"].detach())
    assert torch.equal(g["unused"], torch.zeros(2, dtype=F64))


def test_grad_requires_scalar():
    ps = nc.ParamSet(dtype=F64)
    ps.ones("p", (3,))
    with pytest.raises(ValueError):
        nc.grad(ps["p"] * 2, ps)


def test_adam_first_step_is_lr():
    ps = nc.ParamSet(dtype=F64)
    ps.zeros("p", (1,))
    state = nc.AdamState.for_params(ps)
    nc.adam_step(ps, {"p": torch.ones(1, dtype=F64)}, state)
    assert float(ps["p"].detach()) == pytest.approx(-5e-4, abs=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_is_noop():
    ps = nc.ParamSet(dtype=F64)
    ps.glorot("p", (4,), 2, 2)
    before = ps["p"].detach().clone()
    state = nc.AdamState.for_params(ps)
    for _ in range(5):
        nc.adam_step(ps, {"p": torch.zeros(4, dtype=F64)}, state)
    assert torch.equal(ps["p"].detach(), before)


def test_adam_per_parameter_independence():
    g = np.random.default_rng(0)
    init = {"a": g.normal(size=3), "b": g.normal(size=(2, 2))}
    grads = [{"a": torch.as_tensor(g.normal(size=3)), "b": torch.as_tensor(g.normal(size=(2, 2)))} for _ in range(3)]

    joint = nc.ParamSet(dtype=F64)
    joint.zeros("a", (3,))
    joint.zeros("b", (2, 2))
    joint.load_numpy(init)
    sj = nc.AdamState.for_params(joint)
    for gr in grads:
        nc.adam_step(joint, gr, sj)
    for name in ("a", "b"):
        solo = nc.ParamSet(dtype=F64)
        solo.zeros(name, init[name].shape)
        solo.load_numpy({name: init[name]})
        ss = nc.AdamState.for_params(solo)
        for gr in grads:
            nc.adam_step(solo, {name: gr[name]}, ss)
        assert torch.equal(solo[name], joint[name])


def test_adam_shape_mismatch():
    ps = nc.ParamSet(dtype=F64)
    ps.zeros("p", (2,))
    with pytest.raises(nc.ShapeError):
        nc.adam_step(ps, {"p": torch.zeros(3, dtype=F64)}, nc.AdamState.for_params(ps))


def test_adam_state_round_trip():
    ps = nc.ParamSet()
    ps.glorot("p", (3,), 1, 1)
    st = nc.AdamState.for_params(ps)
    nc.adam_step(ps, {"p": torch.ones(3)}, st)
    back = nc.adam_state_from_arrays(nc.adam_state_arrays(st), ps)
    assert back.step == 1 and torch.equal(back.m["p"], st.m["p"]) and torch.equal(back.v["p"], st.v["p"])


def test_training_is_bit_deterministic():
    def run():
        ps = nc.ParamSet(seed=1)
        fwd = composite_net(ps)
        for k in list(ps.tensors):
            ps.tensors[k] = ps.tensors[k].detach().float().requires_grad_(True)
        st = nc.AdamState.for_params(ps)
        x = torch.as_tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)), dtype=torch.float32)
        for _ in range(5):
            loss = fwd(x).pow(2).sum()
            nc.adam_step(ps, nc.grad(loss, ps), st)
        return ps.to_numpy()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_param_load_mismatch():
    ps = nc.ParamSet()
    ps.zeros("p", (2,))
    with pytest.raises(KeyError):
        ps.load_numpy({"q": np.zeros(2)})
    with pytest.raises(nc.ShapeError):
        ps.load_numpy({"p": np.zeros(3)})
