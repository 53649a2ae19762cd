import math

import numpy as np
import pytest

from cgt import autodiff as ad
from cgt.model import (CgtConfig, TrainConfig, TrainingDivergedError, attention_flops, backward, forward,
                       full_layout, generate, init_params, load_model, loss, make_batch, path_layout, perplexity,
                       save_model, to_paths, train)
from cgt.privacy import DpSgdConfig
from cgt.quantizer import TokenSet


def small_cfg(**kw):
    base = dict(vocab=6, labels=3, s=2, L=2, dim=8, heads=2, layers=2)
    base.update(kw)
    return CgtConfig(**base)


def random_trees(cfg, n, seed=0):
    """Valid token trees: root never null, children of null stay null."""
    rng = np.random.default_rng(seed)
    shape = cfg.shape
    toks = rng.integers(0, cfg.vocab, size=(n, shape.T))
    toks[:, 0] = rng.integers(0, cfg.vocab - 1, size=n)
    for t in range(1, shape.T):
        par = shape.parent(t)
        toks[toks[:, par] == cfg.null_token, t] = cfg.null_token
    return toks, rng.integers(0, cfg.labels, size=n)


def logits_of(params, cfg, toks, labels, layout=None):
    return forward(params, cfg, toks, labels, layout).data


def test_position_depends_only_on_strict_ancestors():
    cfg = small_cfg(vocab=7)
    params = init_params(cfg, 1, np.float64)
    toks, labels = random_trees(cfg, 1, 3)
    base = logits_of(params, cfg, toks, labels)
    shape = cfg.shape
    for t in range(shape.T):
        other = toks.copy()
        other[0, t] = (other[0, t] + 1) % (cfg.vocab - 1)
        out = logits_of(params, cfg, other, labels)
        for u in range(shape.T):
            if t in shape.ancestors(u):
                continue
            assert np.array_equal(out[0, u], base[0, u]), (t, u)
        kids = [u for u in range(shape.T) if t in shape.ancestors(u)]
        if kids:
            assert not np.allclose(out[0, kids], base[0, kids])


def sibling_example_unchanged(cfg, params, toks, labels):
    base = logits_of(params, cfg, toks, labels)
    other = toks.copy()
    other[0, 2] = (other[0, 2] + 1) % (cfg.vocab - 1)
    out = logits_of(params, cfg, other, labels)
    return np.array_equal(out[0, [1, 3, 4]], base[0, [1, 3, 4]])


def test_sibling_independence_example():
    cfg = small_cfg()
    off = small_cfg(use_ancestor_mask=False)
    rng = np.random.default_rng(0)
    broke = False
    for i in range(10):
        toks, labels = random_trees(cfg, 1, i)
        toks[0, :3] = rng.integers(0, cfg.vocab - 1, 3)
        assert sibling_example_unchanged(cfg, init_params(cfg, i, np.float64), toks, labels)
        broke |= not sibling_example_unchanged(off, init_params(off, i, np.float64), toks, labels)
    assert broke


def test_gradient_mask_audit():
    cfg = small_cfg(s=3, L=2)
    params = init_params(cfg, 3, np.float64)
    toks, labels = random_trees(cfg, 2, 5)
    shape = cfg.shape
    for t in range(shape.T):
        logits, inputs = forward(params, cfg, toks, labels, return_inputs=True)
        sel = np.zeros(logits.shape)
        sel[:, t] = np.random.default_rng(t).normal(size=sel[:, t].shape)
        (g,) = ad.grad(ad.sum_(ad.mul(logits, ad.as_tensor(sel))), [inputs])
        allowed = set(shape.ancestors(t)) | {t}
        for u in range(shape.T):
            if u not in allowed:
                assert not g[:, u].any(), (t, u)
        if t > 0:
            assert g[:, shape.parent(t)].any()


def test_sequential_ablation_sees_earlier_siblings():
    cfg = small_cfg(use_ancestor_mask=False)
    params = init_params(cfg, 2, np.float64)
    toks, labels = random_trees(cfg, 1, 4)
    toks[0, :] = [1, 2, 3, 0, 1, 2, 3]
    base = logits_of(params, cfg, toks, labels)
    other = toks.copy()
    other[0, 1] = 4
    out = logits_of(params, cfg, other, labels)
    assert not np.allclose(out[0, 2], base[0, 2])  # sibling 1 precedes 2
    other = toks.copy()
    other[0, 3] = 4
    assert np.array_equal(logits_of(params, cfg, other, labels)[0, :4], base[0, :4])


def test_sibling_subtree_swap_is_equivariant():
    cfg = small_cfg()
    params = init_params(cfg, 5, np.float64)
    toks = np.array([[0, 1, 2, 3, 4, 0, 1]])
    swapped = toks[:, [0, 2, 1, 5, 6, 3, 4]]
    a = logits_of(params, cfg, toks, [1])
    b = logits_of(params, cfg, swapped, [1])
    assert np.allclose(b[0], a[0, [0, 2, 1, 5, 6, 3, 4]], atol=1e-12)


def test_label_toggle():
    cfg = small_cfg()
    params = init_params(cfg, 0, np.float64)
    toks, _ = random_trees(cfg, 1, 0)
    assert not np.allclose(logits_of(params, cfg, toks, [0]), logits_of(params, cfg, toks, [1]))
    off = small_cfg(use_label=False)
    assert np.array_equal(logits_of(params, off, toks, [0]), logits_of(params, off, toks, [2]))


def test_position_table_toggle():
    cfg = small_cfg(use_layer_positions=False)
    assert init_params(cfg, 0)["position_embeddings"].shape == (7, 8)
    assert init_params(small_cfg(), 0)["position_embeddings"].shape == (3, 8)
    toks = np.array([[0, 1, 1, 2, 2, 2, 2]])
    # nodes 1 and 2 carry equal tokens; only per-node positions tell their subtrees apart
    out = logits_of(init_params(cfg, 0, np.float64), cfg, toks, [0])
    assert not np.allclose(out[0, 3], out[0, 5])
    shared = logits_of(init_params(small_cfg(), 0, np.float64), small_cfg(), toks, [0])
    assert np.array_equal(shared[0, 3], shared[0, 5])
    # a query never sees its own position, so same-parent siblings always agree
    assert np.array_equal(out[0, 3], out[0, 4])


def test_zero_token_embeddings_give_uniform_loss():
    cfg = small_cfg()
    params = init_params(cfg, 0, np.float64)
    params["token_embeddings"][:] = 0
    toks, labels = random_trees(cfg, 5, 1)
    assert float(loss(params, cfg, toks, labels).data) == pytest.approx(math.log(cfg.vocab), abs=1e-12)


def test_gradients_match_finite_differences():
    cfg = small_cfg(dim=4, heads=2, layers=2, vocab=5)
    params = init_params(cfg, 3, np.float64)
    rng = np.random.default_rng(0)
    for k in params:  # break symmetry of ones/zeros
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    toks, labels = random_trees(cfg, 3, 2)
    _, grads = backward(params, cfg, toks, labels)
    h = 1e-5
    for name, p in params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(20, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = float(loss(params, cfg, toks, labels).data)
            flat[i] = old - h
            down = float(loss(params, cfg, toks, labels).data)
            flat[i] = old
            num = (up - down) / (2 * h)
            got = grads[name].reshape(-1)[i]
            assert abs(got - num) <= 1e-4 * max(abs(got), abs(num), 1e-6), (name, i, got, num)


def test_absent_label_rows_get_zero_gradient():
    cfg = small_cfg(labels=4)
    params = init_params(cfg, 0, np.float64)
    toks, _ = random_trees(cfg, 4, 0)
    _, grads = backward(params, cfg, toks, np.array([0, 2, 2, 0]))
    g = grads["label_embeddings"]
    assert not g[[1, 3]].any() and g[[0, 2]].any()


def test_fully_masked_batch_has_zero_loss_and_gradients():
    cfg = small_cfg()
    params = init_params(cfg, 0, np.float64)
    toks, labels = random_trees(cfg, 3, 0)
    value, grads = backward(params, cfg, toks, labels, weights=np.zeros_like(toks, dtype=float))
    assert value == 0.0
    assert all(not g.any() for g in grads.values())


def test_path_variant_matches_full_on_first_visits():
    full = small_cfg()
    cheap = small_cfg(variant="cost_efficient")
    params = init_params(full, 0, np.float64)
    toks, labels = random_trees(full, 4, 7)
    a = float(loss(params, full, toks, labels).data)
    b = float(loss(params, cheap, toks, labels).data)
    assert a == pytest.approx(b, rel=1e-12)
    seqs, labs, layout = make_batch(cheap, toks, labels)
    assert seqs.shape == (16, 3) and layout.loss_weights.sum() == 4 * 7
    paths, _ = to_paths(toks, cheap, labels)
    pl = logits_of(params, cheap, paths, labs, path_layout(cheap, 4)).reshape(4, 4, 3, -1)
    fl = logits_of(params, full, toks, labels)
    table = full.shape.path_table
    for p in range(4):
        assert np.allclose(pl[:, p], fl[:, table[p]], atol=1e-12)


def test_attention_flops_cheaper_for_paths():
    for s, L in [(2, 2), (3, 2), (2, 3)]:
        full = attention_flops(small_cfg(s=s, L=L), 10)
        cheap = attention_flops(small_cfg(s=s, L=L, variant="cost_efficient"), 10)
        assert cheap < full


def test_full_batch_loss_decreases_monotonically():
    cfg = small_cfg(vocab=8, dim=16)
    toks, labels = random_trees(cfg, 50, 9)
    res = train(TokenSet(toks, labels), cfg, TrainConfig(steps=10, lr=1e-3, batch_size=50), seed=0)
    trace = [v for _, v in res.trace]
    assert all(b < a for a, b in zip(trace, trace[1:]))


def test_overfit_single_sequence_is_memorized():
    cfg = small_cfg(dim=16)
    seq = np.array([[2, 1, 1, 4, 4, 4, 4]])  # siblings agree, so the ancestor-only model can reproduce it
    res = train(TokenSet(seq, np.array([1])), cfg, TrainConfig(steps=300, lr=1e-2, batch_size=1), seed=0)
    assert float(loss(res.params, cfg, seq, [1]).data) <= 0.05
    gen = generate(res.params, cfg, 1000, [0, 1, 0], temperature=1.0, seed=5)
    assert np.mean((gen.tokens == seq).all(axis=1)) >= 0.9


def test_sequential_model_memorizes_distinct_siblings():
    cfg = small_cfg(dim=16, use_ancestor_mask=False)
    seq = np.array([[0, 1, 2, 3, 4, 0, 1]])
    res = train(TokenSet(seq, np.array([0])), cfg, TrainConfig(steps=300, lr=1e-2, batch_size=1), seed=0)
    gen = generate(res.params, cfg, 1000, [1, 0, 0], temperature=1.0, seed=5)
    assert np.mean((gen.tokens == seq).all(axis=1)) >= 0.9


def test_ancestor_model_cannot_order_siblings():
    cfg = small_cfg(dim=16)
    seq = np.array([[0, 1, 2, 5, 5, 5, 5]])
    res = train(TokenSet(seq, np.array([0])), cfg, TrainConfig(steps=300, lr=1e-2, batch_size=1), seed=0)
    lg = logits_of(res.params, cfg, seq, [0])
    assert np.array_equal(lg[0, 1], lg[0, 2])


def test_overfits_small_set():
    cfg = small_cfg(dim=16, heads=2, layers=2, vocab=6, labels=3)
    toks, labels = random_trees(cfg, 6, 9)
    res = train(TokenSet(toks, labels), cfg, TrainConfig(steps=300, lr=1e-2, batch_size=6), seed=0)
    trace = [v for _, v in res.trace]
    assert trace[-1] < 0.5 * trace[0]
    assert perplexity(res.params, cfg, toks, labels) < 2.5


def test_generation_constraints_and_determinism():
    for kw in ({}, {"use_ancestor_mask": False}, {"variant": "cost_efficient"}):
        cfg = small_cfg(**kw)
        params = init_params(cfg, 4)
        params["token_embeddings"][cfg.null_token] += 0.5  # make nulls common
        out = generate(params, cfg, 300, [0.2, 0.3, 0.5], temperature=1.0, seed=2)
        shape = cfg.shape
        assert (out.tokens[:, 0] != cfg.null_token).all()
        assert out.tokens.min() >= 0 and out.tokens.max() < cfg.vocab
        for t in range(1, shape.T):
            par = shape.parent(t)
            assert (out.tokens[out.tokens[:, par] == cfg.null_token, t] == cfg.null_token).all()
        again = generate(params, cfg, 300, [0.2, 0.3, 0.5], temperature=1.0, seed=2)
        assert np.array_equal(out.tokens, again.tokens)
        a = generate(params, cfg, 50, [1, 0, 0], temperature=0, seed=1)
        b = generate(params, cfg, 50, [1, 0, 0], temperature=0, seed=9)
        assert np.array_equal(a.tokens, b.tokens)
        assert (a.tokens == a.tokens[0]).all()


def test_generation_label_distribution():
    cfg = small_cfg()
    out = generate(init_params(cfg, 0), cfg, 2000, [0.1, 0.0, 0.9], seed=0)
    freq = np.bincount(out.labels, minlength=3) / 2000
    assert freq[1] == 0 and abs(freq[0] - 0.1) < 0.03


def test_generation_errors():
    cfg = small_cfg()
    params = init_params(cfg, 0)
    with pytest.raises(ValueError):
        generate(params, cfg, 0, [1, 1, 1])
    with pytest.raises(ValueError):
        generate(params, cfg, 5, [1, 1, 1], temperature=-1)


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(variant="cost_efficient", use_label=False)
    params = init_params(cfg, 8)
    save_model(tmp_path / "m.cgt", params, cfg)
    back, cfg2 = load_model(tmp_path / "m.cgt")
    assert cfg2 == cfg
    assert list(back) == list(params)
    for k in params:
        assert np.array_equal(back[k].view(np.uint32), params[k].view(np.uint32))
    raw = (tmp_path / "m.cgt").read_bytes()
    (tmp_path / "bad.cgt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.cgt")


def test_dp_without_noise_equals_per_example_training():
    cfg = small_cfg()
    toks, labels = random_trees(cfg, 10, 3)
    data = TokenSet(toks, labels)
    tc = TrainConfig(steps=5, lr=1e-2, batch_size=4, per_example=True)
    plain = train(data, cfg, tc, seed=2)
    dp = train(data, cfg, tc, dp=DpSgdConfig(clip_norm=math.inf, noise_multiplier=0.0), seed=2)
    for k in plain.params:
        assert np.array_equal(plain.params[k], dp.params[k])
    assert dp.privacy["mode"] == "dp-sgd"
    noisy = train(data, cfg, tc, dp=DpSgdConfig(clip_norm=1.0, noise_multiplier=1.0, steps=5), seed=2)
    assert not np.array_equal(noisy.params["l0.wq"], plain.params["l0.wq"])


def test_divergence_is_reported():
    cfg = small_cfg()
    params = init_params(cfg, 0)
    params["l0.wq"][0, 0] = np.nan
    toks, labels = random_trees(cfg, 4, 0)
    with pytest.raises(TrainingDivergedError) as info:
        train(TokenSet(toks, labels), cfg, TrainConfig(steps=3, batch_size=4), params=params)
    assert info.value.step == 0


def test_config_and_input_validation():
    with pytest.raises(ValueError):
        CgtConfig(vocab=5, labels=2, s=2, L=2, dim=6, heads=4)
    with pytest.raises(ValueError):
        CgtConfig(vocab=5, labels=2, s=2, L=2, variant="bogus")
    cfg = small_cfg()
    params = init_params(cfg, 0)
    with pytest.raises(ValueError):
        forward(params, cfg, np.full((1, 7), 9), [0])
    with pytest.raises(ValueError):
        forward(params, cfg, np.zeros((1, 7), int), [5])
    assert full_layout(cfg).ctx_mask.shape == (7, 7)


def test_float32_and_float64_agree():
    cfg = small_cfg()
    p32 = init_params(cfg, 0)
    p64 = {k: v.astype(np.float64) for k, v in p32.items()}
    toks, labels = random_trees(cfg, 3, 0)
    a = logits_of(p32, cfg, toks, labels)
    b = logits_of(p64, cfg, toks, labels)
    assert a.dtype == np.float32 and np.allclose(a, b, atol=1e-5)
    assert isinstance(forward(p32, cfg, toks, labels), ad.Tensor)
