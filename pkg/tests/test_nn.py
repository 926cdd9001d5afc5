import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmeta import autodiff as ad
from hetmeta import nn
from hetmeta.autodiff import ShapeError, Tape, Tensor
from hetmeta.harness.gradcheck import CHECKS, LAYER_TOL, case_error


# --- straight-line reference implementations (plain numpy, no shared code) ---


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_lstm(P, z, h, c):
    f = sig(P["W_f"] @ z + P["U_f"] @ h + P["b_f"])
    i = sig(P["W_i"] @ z + P["U_i"] @ h + P["b_i"])
    o = sig(P["W_o"] @ z + P["U_o"] @ h + P["b_o"])
    cand = np.tanh(P["W_c"] @ z + P["U_c"] @ h + P["b_c"])
    cell = f * c + i * cand
    return o * np.tanh(cell), cell


def ref_bilstm(Pf, Pb, Z):
    H = Pf["U_f"].shape[0]
    M = len(Z)
    hf, hb = [None] * M, [None] * M
    h, c = np.zeros(H), np.zeros(H)
    for m in range(M):
        h, c = ref_lstm(Pf, Z[m], h, c)
        hf[m] = h
    h, c = np.zeros(H), np.zeros(H)
    for m in reversed(range(M)):
        h, c = ref_lstm(Pb, Z[m], h, c)
        hb[m] = h
    return [np.concatenate([hf[m], hb[m]]) for m in range(M)]


def ref_mlp(layers, x):
    for k, (W, b) in enumerate(layers):
        x = W @ x + b
        if k < len(layers) - 1:
            x = np.tanh(x)
    return x


def ref_attention(v, W, Hs, tau):
    scores = np.array([v @ np.tanh(W @ np.concatenate([h, tau])) for h in Hs])
    e = np.exp(scores - scores.max())
    A = e / e.sum()
    return sum(a * h for a, h in zip(A, Hs)), A


def arrays(ps, prefix):
    return {k[len(prefix):]: v.data for k, v in ps.tensors.items() if k.startswith(prefix)}


def layers(ps, prefix):
    out, k = [], 0
    while f"{prefix}.{k}.weight" in ps:
        out.append((ps[f"{prefix}.{k}.weight"].data, ps[f"{prefix}.{k}.bias"].data))
        k += 1
    return out


def noisy_params(arch, seed):
    ps = nn.init_params(arch, seed)
    rng = np.random.default_rng(seed + 100)
    return ps.replace({k: v.data + 0.2 * rng.standard_normal(v.shape) for k, v in ps.tensors.items()})


ARCH = nn.Architecture((3, 2, 4), 4, 4, 3, 2)


# --- architecture and init ------------------------------------------------------


def test_odd_f2_rejected():
    with pytest.raises(ValueError):
        nn.Architecture((3,), 4, 5, 3, 2)


def test_init_deterministic_and_bounded():
    a, b = nn.init_params(ARCH, 7), nn.init_params(ARCH, 7)
    assert a.equal(b)
    assert not a.equal(nn.init_params(ARCH, 8))
    for name, t in a.tensors.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "b_f":
            assert np.all(t.data == 1.0)
        elif leaf == "bias" or leaf.startswith("b_"):
            assert np.all(t.data == 0.0)
        else:
            fan_out, fan_in = (t.shape[0], 1) if t.ndim == 1 else t.shape
            assert np.all(np.abs(t.data) <= np.sqrt(6.0 / (fan_in + fan_out)))


def test_parameter_tags_partition():
    ps = nn.init_params(ARCH, 0)
    internal = set(ps.names(nn.INTERNAL))
    external = set(ps.names(nn.EXTERNAL))
    assert internal | external == set(ps.names()) and not internal & external
    assert all(n.startswith(("tfan.fwd.", "tfan.bwd.", "head.")) for n in internal)
    assert all(n.startswith(("backbone.", "tfan.embed.", "tfan.attn_")) for n in external)


# --- backbone -------------------------------------------------------------------


def test_backbone_matches_reference_and_masks():
    ps = noisy_params(ARCH, 1)
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal(d) for d in ARCH.modality_dims]
    Z = nn.backbone_forward(nn.backbone_view(ps, ARCH.M), xs, [1, 0, 1])
    np.testing.assert_allclose(Z[0].data, ref_mlp(layers(ps, "backbone.0"), xs[0]), rtol=1e-13)
    np.testing.assert_array_equal(Z[1].data, np.zeros(ARCH.f1))
    np.testing.assert_allclose(Z[2].data, ref_mlp(layers(ps, "backbone.2"), xs[2]), rtol=1e-13)


def test_backbone_hand_computed_small_weights():
    arch = nn.Architecture((2, 1), 2, 2, 2, 2)
    ps = nn.init_params(arch, 0)
    vals = {
        "backbone.0.0.weight": np.array([[0.5, 0.0], [0.0, -0.5]]),
        "backbone.0.0.bias": np.array([0.1, 0.0]),
        "backbone.0.1.weight": np.array([[1.0, 1.0], [0.0, 2.0]]),
        "backbone.0.1.bias": np.array([0.0, 0.3]),
    }
    ps = ps.replace(vals)
    z = nn.backbone_forward(nn.backbone_view(ps, 2), [np.array([1.0, 2.0]), np.array([5.0])], [1, 0])
    h = np.tanh([0.5 * 1 + 0.1, -0.5 * 2])
    np.testing.assert_allclose(z[0].data, [h[0] + h[1], 2 * h[1] + 0.3], rtol=1e-15)


def test_backbone_all_masked_gives_zero_and_no_gradient():
    ps = noisy_params(ARCH, 2)
    ext = {n: Tensor(t.data) for n, t in ps.tensors.items() if n.startswith("backbone.")}
    rng = np.random.default_rng(1)
    xs = [rng.standard_normal((3, d)) for d in ARCH.modality_dims]
    with Tape() as tape:
        tape.watch(*ext.values())
        Z = nn.backbone_forward(nn.backbone_view(ext, ARCH.M), xs, [0, 0, 0])
    assert all(z.shape == (3, ARCH.f1) and not np.any(z.data) for z in Z)
    # the masked path never touches a channel parameter
    assert tape.entries == []
    assert not any(tape.tracks(z) for z in Z)


def test_masked_channel_gets_exact_zero_gradient():
    ps = noisy_params(ARCH, 3)
    ext = {n: Tensor(t.data) for n, t in ps.tensors.items()}
    rng = np.random.default_rng(2)
    xs = [rng.standard_normal((3, d)) for d in ARCH.modality_dims]
    with Tape() as tape:
        tape.watch(*ext.values())
        Z = nn.backbone_forward(nn.backbone_view(ext, ARCH.M), xs, [1, 0, 1])
        y = ad.sum_(ad.stack([ad.sum_(ad.tanh(z)) for z in Z]))
    gm = ad.backward(tape, y)
    for n, t in ext.items():
        if n.startswith("backbone.1."):
            assert not gm.reached(t) and not np.any(gm[t].data)
        elif n.startswith(("backbone.0.", "backbone.2.")):
            assert np.any(gm[t].data)


def test_backbone_dimension_mismatch():
    ps = nn.init_params(ARCH, 0)
    with pytest.raises(ShapeError):
        nn.backbone_forward(nn.backbone_view(ps, ARCH.M), [np.zeros(3), np.zeros(3), np.zeros(4)], [1, 1, 1])


# --- LSTM -----------------------------------------------------------------------


def test_lstm_zero_params_gives_zero():
    p = nn._lstm({f"x.{k}": Tensor(np.zeros((2, 4) if k[0] == "W" else (2, 2) if k[0] == "U" else 2)) for k in nn.LSTM_FIELDS}, "x")
    # zero initial states: cell = 0.5 * 0 + 0.5 * tanh(0) = 0, h = 0.5 * tanh(0) = 0
    h, c = nn.lstm_cell(p, np.ones(4), np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(h.data, [0.0, 0.0])
    np.testing.assert_array_equal(c.data, [0.0, 0.0])
    # with a carried cell the forget gate halves it
    h, c = nn.lstm_cell(p, np.ones(4), np.ones(2), np.ones(2))
    np.testing.assert_array_equal(c.data, [0.5, 0.5])
    np.testing.assert_allclose(h.data, 0.5 * np.tanh([0.5, 0.5]), rtol=1e-15)


def test_lstm_saturated_biases():
    big = 30.0
    P = {k: np.zeros((2, 4) if k[0] == "W" else (2, 2) if k[0] == "U" else 2) for k in nn.LSTM_FIELDS}
    P.update(b_o=np.full(2, big), b_i=np.full(2, big), b_c=np.full(2, big))
    p = nn._lstm({f"x.{k}": Tensor(v) for k, v in P.items()}, "x")
    h, c = nn.lstm_cell(p, np.zeros(4), np.zeros(2), np.zeros(2))
    want_h, want_c = ref_lstm(P, np.zeros(4), np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(h.data, want_h, rtol=1e-15)
    np.testing.assert_allclose(c.data, want_c, rtol=1e-15)
    assert h.data[0] == pytest.approx(np.tanh(1.0), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), batch=st.integers(1, 4))
def test_lstm_matches_reference(seed, batch):
    ps = noisy_params(ARCH, seed)
    P = arrays(ps, "tfan.fwd.")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, ARCH.f1))
    h0 = rng.standard_normal((batch, ARCH.hidden))
    c0 = rng.standard_normal((batch, ARCH.hidden))
    h, c = nn.lstm_cell(nn._lstm(ps, "tfan.fwd"), z, h0, c0)
    for b in range(batch):
        rh, rc = ref_lstm(P, z[b], h0[b], c0[b])
        np.testing.assert_allclose(h.data[b], rh, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(c.data[b], rc, rtol=1e-12, atol=1e-14)


def test_lstm_shape_errors():
    ps = nn.init_params(ARCH, 0)
    cell = nn._lstm(ps, "tfan.fwd")
    with pytest.raises(ShapeError):
        nn.lstm_cell(cell, np.zeros(3), np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeError):
        nn.lstm_cell(cell, np.zeros(4), np.zeros(3), np.zeros(2))


# --- BiLSTM ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_bilstm_matches_unrolled_reference(seed):
    ps = noisy_params(ARCH, seed)
    rng = np.random.default_rng(seed)
    Z = [rng.standard_normal(ARCH.f1) for _ in range(3)]
    H = nn.iterative_aggregate(nn.tfan_view(ps), Z)
    want = ref_bilstm(arrays(ps, "tfan.fwd."), arrays(ps, "tfan.bwd."), Z)
    for got, ref in zip(H, want):
        assert got.shape == (ARCH.f2,)
        np.testing.assert_allclose(got.data, ref, rtol=1e-12, atol=1e-14)


def test_bilstm_single_token_shared_weights_symmetric():
    ps = noisy_params(ARCH, 3)
    ps = ps.replace({f"tfan.bwd.{k}": ps[f"tfan.fwd.{k}"].data for k in nn.LSTM_FIELDS})
    (h,) = nn.iterative_aggregate(nn.tfan_view(ps), [np.random.default_rng(0).standard_normal(ARCH.f1)])
    H = ARCH.hidden
    np.testing.assert_array_equal(h.data[:H], h.data[H:])


def test_bilstm_zero_params():
    ps = nn.init_params(ARCH, 0)
    ps = ps.replace({n: np.zeros(t.shape) for n, t in ps.tensors.items()})
    H = nn.iterative_aggregate(nn.tfan_view(ps), [np.ones(ARCH.f1)] * 3)
    assert all(not np.any(h.data) for h in H)


def test_bilstm_is_order_dependent():
    ps = noisy_params(ARCH, 4)
    rng = np.random.default_rng(4)
    Z = [rng.standard_normal(ARCH.f1) for _ in range(3)]
    a = nn.iterative_aggregate(nn.tfan_view(ps), Z)
    b = nn.iterative_aggregate(nn.tfan_view(ps), Z[::-1])
    # not required to be invariant: the reversed order changes the middle state
    assert not np.allclose(a[1].data, b[1].data)


def test_bilstm_empty_rejected():
    with pytest.raises(ShapeError):
        nn.iterative_aggregate(nn.tfan_view(nn.init_params(ARCH, 0)), [])


# --- task embedding ---------------------------------------------------------------


def test_task_embed_zero_weights_gives_bias():
    ps = nn.init_params(ARCH, 0)
    ps = ps.replace({"tfan.embed.0.weight": np.zeros((3, 3)), "tfan.embed.1.weight": np.zeros((3, 3)),
                     "tfan.embed.1.bias": np.array([0.5, -1.0, 2.0])})
    tau = nn.task_embed(nn.tfan_view(ps), [1, 0, 1])
    np.testing.assert_array_equal(tau.data, [0.5, -1.0, 2.0])


def test_task_embed_identity_layer_selects_columns():
    # one linear layer: tau = W c + b, c = [1, 0, 1] selects columns 0 and 2
    W = np.arange(9.0).reshape(3, 3)
    b = np.array([0.1, 0.2, 0.3])
    params = nn.TfanParams(None, None, [nn.LinearParams(Tensor(W), Tensor(b))], None, None)
    tau = nn.task_embed(params, [1, 0, 1])
    np.testing.assert_allclose(tau.data, W[:, 0] + W[:, 2] + b, rtol=1e-15)


def test_task_embed_deterministic():
    ps = noisy_params(ARCH, 5)
    a = nn.task_embed(nn.tfan_view(ps), (1, 1, 0))
    b = nn.task_embed(nn.tfan_view(ps), [1, 1, 0])
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_allclose(a.data, ref_mlp(layers(ps, "tfan.embed"), np.array([1.0, 1.0, 0.0])), rtol=1e-13)


# --- attention --------------------------------------------------------------------


def test_attention_identical_states_uniform():
    ps = noisy_params(ARCH, 6)
    h = np.random.default_rng(6).standard_normal(ARCH.f2)
    h_star, A = nn.attention_aggregate(nn.tfan_view(ps), [h, h, h], Tensor(np.ones(ARCH.f3)))
    np.testing.assert_allclose(A.data, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(h_star.data, h, atol=1e-12)


def test_attention_single_modality():
    ps = noisy_params(ARCH, 7)
    h = np.random.default_rng(7).standard_normal(ARCH.f2)
    h_star, A = nn.attention_aggregate(nn.tfan_view(ps), [h], Tensor(np.zeros(ARCH.f3)))
    np.testing.assert_array_equal(A.data, [1.0])
    np.testing.assert_allclose(h_star.data, h, rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_reference(seed):
    ps = noisy_params(ARCH, seed)
    rng = np.random.default_rng(seed)
    Hs = [rng.standard_normal(ARCH.f2) for _ in range(2)]
    tau = rng.standard_normal(ARCH.f3)
    h_star, A = nn.attention_aggregate(nn.tfan_view(ps), Hs, Tensor(tau))
    want_h, want_A = ref_attention(ps["tfan.attn_v"].data, ps["tfan.attn_W"].data, Hs, tau)
    np.testing.assert_allclose(A.data, want_A, rtol=1e-12)
    np.testing.assert_allclose(h_star.data, want_h, rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20), M=st.integers(1, 6), scale=st.floats(0.01, 50.0))
def test_attention_normalised(seed, M, scale):
    rng = np.random.default_rng(seed)
    params = nn.TfanParams(None, None, [], Tensor(rng.standard_normal(3) * scale),
                           Tensor(rng.standard_normal((3, 7)) * scale))
    Hs = [rng.standard_normal((2, 4)) * scale for _ in range(M)]
    _, A = nn.attention_aggregate(params, Hs, Tensor(rng.standard_normal(3)))
    assert np.all(np.abs(A.data.sum(axis=1) - 1.0) <= 1e-12)


def test_attention_shape_error():
    ps = nn.init_params(ARCH, 0)
    with pytest.raises(ShapeError):
        nn.attention_aggregate(nn.tfan_view(ps), [np.zeros(ARCH.f2)], Tensor(np.zeros(ARCH.f3 + 1)))


# --- head ---------------------------------------------------------------------------


def test_head_zero_weights_gives_bias():
    ps = nn.init_params(ARCH, 0)
    ps = ps.replace({"head.0.weight": np.zeros((4, 4)), "head.1.weight": np.zeros((2, 4)),
                     "head.1.bias": np.array([0.3, -0.2])})
    np.testing.assert_array_equal(nn.head_forward(nn.head_view(ps), np.ones(4)).data, [0.3, -0.2])


def test_head_identity_single_layer():
    b = np.array([0.1, 0.2, 0.3])
    head = nn.HeadParams([nn.LinearParams(Tensor(np.eye(3)), Tensor(b))])
    h = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(nn.head_forward(head, h).data, h + b, rtol=1e-15)


def test_head_matches_reference():
    ps = noisy_params(ARCH, 8)
    h = np.random.default_rng(8).standard_normal(ARCH.f2)
    np.testing.assert_allclose(nn.head_forward(nn.head_view(ps), h).data, ref_mlp(layers(ps, "head"), h), rtol=1e-13)
    with pytest.raises(ShapeError):
        nn.head_forward(nn.head_view(ps), np.zeros(ARCH.f2 + 1))


# --- parameter counts ---------------------------------------------------------------


@pytest.mark.parametrize("f1, f2, f3", [(4, 4, 3), (32, 16, 8), (128, 64, 64)])
def test_aggregator_count_independent_of_M(f1, f2, f3):
    counts = set()
    for M in (2, 4, 8):
        ps = nn.init_params(nn.Architecture((3,) * M, f1, f2, f3, 5), 0)
        tfan = nn.tfan_view(ps)
        counts.add(nn.aggregator_param_count(tfan))
        assert nn.tfan_param_count(tfan) == nn.tfan_param_formula(M, f1, f2, f3)
    assert len(counts) == 1


# --- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("check", ["linear", "lstm", "bilstm", "embed", "attention", "head", "backbone"])
def test_layer_gradients_match_fd(check):
    worst = max(case_error(case) for s in range(3) for case in CHECKS[check](s))
    assert worst < LAYER_TOL
