import numpy as np
import pytest

from adensemble import architectures as A
from adensemble import tensor as T
from adensemble.archive import WeightArchive
from adensemble.errors import ConfigError, NotFoundError, ShapeError, TransferError
from oracles import numeric_grad


@pytest.fixture(scope="module")
def ir():
    return A.build_ir_brainnet()


@pytest.fixture(scope="module")
def dem():
    return A.build_modified_demnet()


def _conv_widths(g):
    return [l.units for l in g.layers if l.kind == "conv3x3"]


def _pooled_sizes(g):
    return [g.input_shape[0]] + [outs[0] for l, (_, outs) in zip(g.layers, A.layer_shapes(g))
                                 if l.kind in ("maxpool2", "avgpool2")]


# ---------------------------------------------------------------- structure and counts

def test_ir_brainnet_counts(ir):
    assert A.param_count(ir) == (1_801_464, 1_801_464)
    assert A.layer_param_count(ir, "conv2") == 73_856
    assert A.layer_param_count(ir, "dense1") == 102_500
    assert A.layer_shapes(ir)[ir.layers.index(ir.layer("flatten"))][1] == (1024,)
    assert _conv_widths(ir) == [64, 128, 128, 256, 256, 256]
    assert _pooled_sizes(ir) == [176, 88, 44, 22, 11, 5, 2]


def test_modified_demnet_counts(dem):
    total, trainable = A.param_count(dem)
    assert total == 1_821_192 and total - trainable == 960
    assert A.layer_shapes(dem)[dem.layers.index(dem.layer("flatten"))][1] == (6400,)
    assert _conv_widths(dem) == [16, 16, 32, 32, 64, 64, 128, 128, 256, 256]
    assert _pooled_sizes(dem) == [176, 88, 44, 22, 11, 5]
    assert [l.kind for l in dem.layers if l.kind.endswith("pool2")] == \
        ["avgpool2", "maxpool2", "maxpool2", "maxpool2", "avgpool2"]


def test_param_count_rule_per_kind():
    assert A.param_count(A.ModelGraph([])) == (0, 0)
    g = A.ModelGraph([A.LayerSpec("conv3x3", "c", 64)], input_shape=(8, 8, 3))
    assert A.param_count(g) == (1792, 1792)
    g = A.ModelGraph([A.LayerSpec("batchnorm", "bn")], input_shape=(4, 4, 10))
    assert A.param_count(g) == (40, 20)


def test_memory_accounting(ir, dem):
    assert A.memory_bytes(ir) == 7_205_856
    assert A.memory_bytes(dem) == 7_284_768
    for g in (ir, dem):
        assert A.memory_bytes(g) == 4 * A.param_count(g)[0]
    mib = [A.flop_count(g).memory_mib for g in (ir, dem)]
    assert [round(m, 2) for m in mib] == [6.87, 6.95]
    assert round(sum(mib), 2) == 13.82


# ---------------------------------------------------------------- FLOPs

def test_flops_dense_and_empty():
    g = A.ModelGraph([A.LayerSpec("dense", "d", 100)], input_shape=(1024,))
    assert A.flop_count(g).flops == 204_800
    assert A.flop_count(A.ModelGraph([])).flops == 0


@pytest.mark.parametrize("convention", A.FLOP_CONVENTIONS)
def test_flops_ordering_and_additivity(ir, dem, convention):
    r_ir, r_dem = A.flop_count(ir, convention), A.flop_count(dem, convention)
    ens = A.ensemble_cost([r_ir, r_dem])
    assert r_dem.flops < r_ir.flops < ens.flops
    assert ens.flops == r_ir.flops + r_dem.flops + 3 * 4
    for r in (r_ir, r_dem):
        assert r.flops == sum(l["flops"] for l in r.per_layer)
        assert all(l["flops"] == 0 for l in r.per_layer if l["kind"] == "flatten")


def test_default_convention_matches_hand_formula(ir):
    rep = A.flop_count(ir, "default")
    for layer, (ins, outs), row in zip(ir.layers, A.layer_shapes(ir), rep.per_layer):
        if layer.kind == "conv3x3":
            H, W, Co = outs
            assert row["flops"] == H * W * Co * 2 * 9 * ins[2] + H * W * Co
        elif layer.kind == "maxpool2":
            assert row["flops"] == outs[0] * outs[1] * outs[2] * 4


def test_flops_reference_values(ir, dem):
    # frozen outputs; see the README section on cost conventions
    assert A.flop_count(dem, "mac").flops == 515_492_496
    assert round(A.flop_count(dem, "mac").gflops, 4) == A.REFERENCE_GFLOPS["modified-demnet"]
    conv2 = next(l for l in A.flop_count(ir, "default").per_layer if l["name"] == "conv2")
    assert conv2["flops"] == 1_142_890_496
    assert round(2 * conv2["flops"] / 1e9, 4) == A.REFERENCE_GFLOPS["ir-brainnet/conv2"]
    assert A.flop_count(ir, "default").flops == 2_287_951_760


def test_unknown_convention(ir):
    with pytest.raises(ConfigError):
        A.flop_count(ir, "bogus")


# ---------------------------------------------------------------- init and transfer

def test_kaiming_statistics(ir):
    w = A.kaiming_init(ir, 7).params["dense1/w"]
    assert w.shape == (1024, 100)
    assert abs(w.mean()) < 0.01
    assert abs(w.var() / (2 / 1024) - 1) < 0.15
    conv = A.kaiming_init(ir, 7).params["conv4/w"]
    assert abs(conv.var() / (2 / (9 * 128)) - 1) < 0.15


def test_kaiming_determinism_and_defaults(dem):
    a, b, c = (A.kaiming_init(dem, s) for s in (42, 42, 43))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["conv1/w"], c.params["conv1/w"])
    assert np.all(a.params["conv3/b"] == 0)
    assert np.all(a.params["bn2/gamma"] == 1) and np.all(a.params["bn2/moving_var"] == 1)
    assert np.all(a.params["bn2/beta"] == 0) and np.all(a.params["bn2/moving_mean"] == 0)
    assert all(v.dtype == np.float32 for v in a.params.values())


def _donor(rng, shape=(3, 3, 64, 128)):
    arc = WeightArchive()
    arc.add("donor/w", rng.standard_normal(shape))
    arc.add("donor/b", rng.standard_normal(shape[-1]))
    return arc


def test_import_pretrained_layer(ir, rng):
    base = A.kaiming_init(ir, 0)
    arc = _donor(rng)
    g = A.import_pretrained_layer(base, "conv2", arc, "donor")
    np.testing.assert_array_equal(g.params["conv2/w"], arc["donor/w"])
    np.testing.assert_array_equal(g.params["conv2/b"], arc["donor/b"])
    assert g.params["conv2/w"].size + g.params["conv2/b"].size == 73_856
    assert "conv2/w" in g.trainable_names()
    # the source graph is untouched
    assert not np.array_equal(base.params["conv2/w"], g.params["conv2/w"])


def test_import_wrong_shape_or_missing_entry(ir, rng):
    with pytest.raises(TransferError, match=r"\(3, 3, 3, 64\).*\(3, 3, 64, 128\)"):
        A.import_pretrained_layer(ir, "conv2", _donor(rng, (3, 3, 3, 64)), "donor")
    with pytest.raises(NotFoundError):
        A.import_pretrained_layer(ir, "conv2", _donor(rng), "other")
    with pytest.raises(NotFoundError):
        A.import_pretrained_layer(ir, "conv99", _donor(rng), "donor")


def test_import_then_forward_equals_hand_built(rng):
    g = A.kaiming_init(A.build_toy_ir_brainnet(), 1)
    arc = _donor(rng, g.params["conv2/w"].shape)
    imported = A.import_pretrained_layer(g, "conv2", arc, "donor")
    hand = g.copy()
    hand.params["conv2/w"] = arc["donor/w"].copy()
    hand.params["conv2/b"] = arc["donor/b"].copy()
    x = rng.random((3, 32, 32, 3)).astype(np.float32)
    np.testing.assert_array_equal(A.forward(imported, x), A.forward(hand, x))


# ---------------------------------------------------------------- forward / backward

@pytest.mark.parametrize("builder", [A.build_ir_brainnet, A.build_modified_demnet])
def test_forward_full_size_contract(builder, rng):
    g = A.kaiming_init(builder(), 3)
    x = rng.random((2, 176, 176, 3)).astype(np.float32)
    p = A.forward(g, x)
    assert p.shape == (2, 4) and p.dtype == np.float32
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)
    one_by_one = np.concatenate([A.forward(g, x[:1]), A.forward(g, x[1:])])
    np.testing.assert_allclose(p, one_by_one, atol=1e-6)


@pytest.mark.xfail(strict=True, reason="He-normal init with zero biases on [0,1] inputs gives logits "
                   "with spread of several units, so fresh nets are not near-uniform")
@pytest.mark.parametrize("builder", [A.build_ir_brainnet, A.build_modified_demnet])
def test_fresh_net_near_uniform_band(builder):
    x = np.random.default_rng(0).random((2, 176, 176, 3)).astype(np.float32)
    for seed in range(5):
        p = A.forward(A.kaiming_init(builder(), seed), x)
        assert np.all((p >= 0.05) & (p <= 0.6))


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        A.forward(A.build_toy_ir_brainnet(), np.zeros((1, 30, 32, 3)))


def test_predict_batches_match_forward(rng):
    g = A.kaiming_init(A.build_toy_modified_demnet(), 0)
    x = rng.random((13, 32, 32, 3)).astype(np.float32)
    np.testing.assert_allclose(A.predict(g, x, batch_size=4), A.forward(g, x), atol=1e-6)
    assert A.predict(g, x[:0]).shape == (0, 4)


def _tiny(kind):
    if kind == "ir":
        g = A.build_ir_brainnet(8, filters=(2, 3), dense_units=4)
    else:
        g = A.build_modified_demnet(16, stem=(2,), blocks=((2, "max"), (3, "avg")), dense_units=4)
    g = A.kaiming_init(g, 5)
    g.params = {k: v.astype(np.float64) for k, v in g.params.items()}
    for k in g.params:
        if k.endswith(("/b", "/beta")):
            g.params[k] = np.random.default_rng(len(k)).standard_normal(g.params[k].shape) * 0.1
    return g


@pytest.mark.parametrize("kind", ["ir", "dem"])
def test_whole_graph_backward_matches_finite_differences(kind):
    g = _tiny(kind)
    # Central differences are wrong when a ReLU input or a max-pool near-tie
    # sits within one step of its kink. Seed 9 hits that case for one bias
    # in the DEMNET graph; this seed keeps every kink farther away.
    rng = np.random.default_rng(11)
    x = rng.random((3,) + g.input_shape)
    y = np.eye(4)[[0, 2, 3]]

    def loss_for(key):
        def f(value):
            h = g.copy()
            h.params[key] = value
            return T.cross_entropy(A.forward(h, x, "train")[0], y)[0]
        return f

    probs, caches = A.forward(g.copy(), x, "train")
    grads = A.backward(g, caches, T.cross_entropy(probs, y)[1])
    assert set(grads) == set(g.trainable_names())
    for key in grads:
        num = numeric_grad(loss_for(key), g.params[key])
        np.testing.assert_allclose(grads[key], num, rtol=1e-4, atol=1e-7, err_msg=key)


def test_train_mode_updates_moving_stats_only_in_train(rng):
    g = A.kaiming_init(A.build_toy_modified_demnet(), 0)
    x = rng.random((4, 32, 32, 3)).astype(np.float32)
    before = g.params["bn1/moving_mean"].copy()
    A.forward(g, x, "infer")
    np.testing.assert_array_equal(g.params["bn1/moving_mean"], before)
    A.forward(g, x, "train")
    assert not np.array_equal(g.params["bn1/moving_mean"], before)


def test_build_model_and_recipe_round_trip():
    for name in A.MODEL_NAMES:
        for toy in (False, True):
            g = A.build_model(name, toy)
            assert A.param_count(A.build_from_recipe(g.recipe)) == A.param_count(g)
    with pytest.raises(ConfigError):
        A.build_model("bogus")


def test_ir_filter_sequence_is_the_only_non_decreasing_fit():
    # Exhaustive search over widths up to 256 with the last width pinned at 256
    # (2x2x256 flatten), conv2 at 73,856 parameters and the overall total.
    head = 1024 * 100 + 100 + 100 * 4 + 4
    conv = lambda cin, cout: 9 * cin * cout + cout  # noqa: E731
    fits = []
    for f1 in range(1, 257):
        f2, rem = divmod(73_856, 9 * f1 + 1)
        if rem or not f1 <= f2 <= 256:
            continue
        for f3 in range(f2, 257):
            for f4 in range(f3, 257):
                for f5 in range(f4, 257):
                    total = (conv(3, f1) + conv(f1, f2) + conv(f2, f3) + conv(f3, f4)
                             + conv(f4, f5) + conv(f5, 256) + head)
                    if total == 1_801_464:
                        fits.append((f1, f2, f3, f4, f5, 256))
    assert fits == [A.IR_FILTERS]
