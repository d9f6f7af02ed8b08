import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camlab import evaluation as ev
from camlab import explain as ex
from camlab.network import forward, init_network, predict, reference_cnn
from camlab.training import LabeledSample, accuracy, generate_shapes_dataset

MAP3 = np.float32([[5, 1, 3], [3, 9, 0], [2, 2, 7]])
# descending value, ties in raster order: 9, 7, 5, 3(0,2), 3(1,0), 2(2,0), 2(2,1), 1, 0
ORDER3 = [4, 8, 0, 2, 3, 6, 7, 1, 5]


@pytest.fixture(scope="module")
def toy():
    net = init_network([("conv2d", 1, 3, 3), ("relu",), ("global_average_pool",), ("linear", 3, 3)], (1, 3, 3), 4)
    x = np.random.default_rng(1).random((1, 3, 3)).astype(np.float32)
    return net, x


def brute_force_curve(net, start, end, order, steps, cls):
    """Fresh single-image forward for every step; no batching, no reuse."""
    n = len(order)
    scores = []
    for s in range(steps + 1):
        img = np.array(start, dtype=np.float32).reshape(-1)
        for i in order[: s * n // steps]:
            img[i] = np.asarray(end, dtype=np.float32).reshape(-1)[i]
        z = forward(net, img.reshape(start.shape)).logits.astype(np.float64)
        e = np.exp(z - z.max())
        scores.append((e / e.sum())[cls])
    return np.array(scores)


class TestDeletion:
    @pytest.mark.parametrize("steps", [9, 4, 2])
    def test_matches_brute_force_bit_for_bit(self, toy, steps):
        net, x = toy
        p = predict(forward(net, x).logits)
        curve = ev.deletion_curve(net, x, MAP3, steps=steps, baseline=0.25)
        want = brute_force_curve(net, x, np.full_like(x, 0.25), ORDER3, steps, p)
        np.testing.assert_array_equal(curve.scores, want)
        np.testing.assert_array_equal(curve.fractions, [(s * 9 // steps) / 9 for s in range(steps + 1)])

    def test_endpoints(self):
        rng = np.random.default_rng(0)
        net = reference_cnn(0, image_size=16)
        x = rng.random((1, 16, 16)).astype(np.float32)
        sal = rng.random((16, 16)).astype(np.float32)
        p = predict(forward(net, x).logits)
        for base in (0.0, 0.3):
            curve = ev.deletion_curve(net, x, sal, steps=7, baseline=base)
            z0 = forward(net, x).logits.astype(np.float64)
            z1 = forward(net, np.full_like(x, base)).logits.astype(np.float64)
            assert curve.scores[0] == ev.softmax64(z0)[p]
            assert curve.scores[-1] == ev.softmax64(z1)[p]
            ins = ev.insertion_curve(net, x, sal, steps=7, baseline=base)
            assert ins.scores[0] == curve.scores[-1] and ins.scores[-1] == curve.scores[0]

    def test_accuracy_mode_is_binary(self, toy):
        net, x = toy
        c = ev.deletion_curve(net, x, MAP3, mode=ev.ACCURACY, steps=9)
        assert set(np.unique(c.scores)) <= {0.0, 1.0} and c.scores[0] == 1.0

    def test_label_only_affects_accuracy_mode(self, toy):
        net, x = toy
        p = predict(forward(net, x).logits)
        other = (p + 1) % 3
        c = ev.deletion_curve(net, x, MAP3, mode=ev.ACCURACY, steps=9, label=other)
        assert c.scores[0] == 0.0

    def test_errors(self, toy):
        net, x = toy
        with pytest.raises(ValueError, match="map shape"):
            ev.deletion_curve(net, x, np.ones((2, 2)))
        with pytest.raises(ValueError, match="steps"):
            ev.deletion_curve(net, x, MAP3, steps=1)
        with pytest.raises(ValueError, match="mode"):
            ev.deletion_curve(net, x, MAP3, mode="bogus", steps=3)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.int8, (3, 3), elements=st.integers(0, 3)), st.integers(2, 9), st.randoms())
    def test_ties_resolve_by_raster_order(self, toy, values, steps, random):
        net, x = toy
        cells = [(i, j) for i in range(3) for j in range(3)]
        random.shuffle(cells)
        sal = np.zeros((3, 3), np.float32)
        for i, j in cells:  # construction order must not matter
            sal[i, j] = values[i, j]
        order = sorted(range(9), key=lambda k: (-float(values.flat[k]), k))
        p = predict(forward(net, x).logits)
        want = brute_force_curve(net, x, np.zeros_like(x), order, steps, p)
        got = ev.deletion_curve(net, x, sal, steps=steps)
        np.testing.assert_array_equal(got.scores, want)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, (3, 3), elements=st.floats(0, 1, width=32)), st.integers(2, 9))
    def test_curve_invariants(self, toy, sal, steps):
        net, x = toy
        for fn in (ev.deletion_curve, ev.insertion_curve):
            c = fn(net, x, sal, steps=steps)
            assert c.fractions[0] == 0 and c.fractions[-1] == 1 and np.all(np.diff(c.fractions) > 0)
            assert len(c.fractions) == len(c.scores) == steps + 1 and 0 <= c.auc <= 1


class TestInsertion:
    def test_is_deletion_with_roles_swapped(self, toy):
        net, x = toy
        base = np.full_like(x, 0.5)
        p = predict(forward(net, x).logits)
        ins = ev.insertion_curve(net, x, MAP3, steps=9, baseline=0.5)
        swapped = ev._curve(net, base, x, MAP3, ev.PROBABILISTIC, 9, p, p)
        np.testing.assert_array_equal(ins.scores, swapped.scores)
        np.testing.assert_array_equal(ins.scores, brute_force_curve(net, base, x, ORDER3, 9, p))


class TestAuc:
    @given(st.floats(0, 1), st.integers(2, 50))
    def test_constant_curve(self, c, steps):
        f = np.linspace(0, 1, steps + 1)
        assert abs(ev.trapezoid_auc(f, np.full(steps + 1, c)) - c) <= 1e-9

    def test_linear_ramp(self):
        assert ev.trapezoid_auc([0, 0.5, 1], [0, 0.5, 1]) == 0.5


class TestBaseline:
    def test_forms(self):
        x = np.zeros((2, 3, 3), np.float32)
        np.testing.assert_array_equal(ev.baseline_image(x, 0.5), np.full((2, 3, 3), 0.5))
        per_channel = ev.baseline_image(x, [0.1, 0.9])
        np.testing.assert_array_equal(per_channel[1], np.full((3, 3), np.float32(0.9)))


@pytest.fixture(scope="module")
def small_set():
    samples = generate_shapes_dataset(3, 4, 16)
    return reference_cnn(1, image_size=16, width=4), samples


class TestMaskedAccuracy:
    def test_identity_mask(self, small_set):
        net, samples = small_set
        ones = [np.ones((16, 16))] * len(samples)
        assert ev.masked_accuracy(net, samples, ones) == accuracy(net, samples)

    def test_zero_mask(self, small_set):
        net, samples = small_set
        zeros = [np.zeros((16, 16))] * len(samples)
        blank = [LabeledSample(np.zeros_like(s.image), s.label) for s in samples]
        assert ev.masked_accuracy(net, samples, zeros) == accuracy(net, blank)

    def test_threshold_binarizes(self, small_set):
        net, samples = small_set
        maps = [np.full((16, 16), 0.3)] * len(samples)
        assert ev.masked_accuracy(net, samples, maps, threshold=0.2) == accuracy(net, samples)

    def test_count_mismatch(self, small_set):
        net, samples = small_set
        with pytest.raises(ValueError, match="maps"):
            ev.masked_accuracy(net, samples, [np.ones((16, 16))])


class TestPointingGame:
    def test_single_pixel_inside(self):
        mask = np.zeros((4, 4))
        mask[1:3, 1:3] = 1
        m = np.zeros((4, 4))
        m[2, 1] = 0.7
        assert ev.pointing_hit(m, mask)

    def test_all_zero_map_misses(self):
        assert not ev.pointing_hit(np.zeros((4, 4)), np.ones((4, 4)))

    def test_first_max_in_raster_order(self):
        mask = np.zeros((2, 2))
        mask[1, 1] = 1
        assert not ev.pointing_hit([[1, 0], [0, 1]], mask)

    def test_constructed_fixtures(self):
        rng = np.random.default_rng(0)
        maps, samples, hits = [], [], 0
        for i in range(100):
            mask = np.zeros((8, 8), np.float32)
            mask[2:5, 3:6] = 1
            m = rng.random((8, 8)) * 0.5
            inside = i % 3 != 0
            y, x = (3, 4) if inside else (7, 0)
            m[y, x] = 1.0
            hits += inside
            maps.append(m)
            samples.append(LabeledSample(np.zeros((1, 8, 8), np.float32), 0, mask))
        assert ev.pointing_game(maps, samples) == hits / 100 == 0.66

    def test_missing_mask(self):
        with pytest.raises(ValueError, match="masks"):
            ev.pointing_game([np.ones((2, 2))], [LabeledSample(np.zeros((1, 2, 2)), 0)])


def _emap(raw, paradigm):
    raw = np.asarray(raw, np.float32)
    return ex.ExplanationMap(raw, ex.postprocess_map(raw, *raw.shape), paradigm, 0, 0)


def _complete(cu, cf, ct):
    cu, cf, ct = _emap(cu, ex.CORRELATION), _emap(cf, ex.COUNTERFACTUAL), _emap(ct, ex.CONTRASTIVE)
    return ex.CompleteExplanation(cu, cf, ct, cu.raw + ct.raw + cf.raw)


class TestCompletenessCoverage:
    def test_full_complete_map(self):
        comp = _complete(np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        assert ev.completeness_coverage(comp, np.ones((2, 2)))["complete"] == 1.0

    def test_all_zero(self):
        z = np.zeros((3, 3))
        out = ev.completeness_coverage(_complete(z, z, z), np.ones((3, 3)))
        assert out == {"correlation": 0.0, "counterfactual": 0.0, "contrastive": 0.0, "complete": 0.0}

    def test_shared_max_fixture(self):
        # the strongest component's peak is also the complete map's peak, so
        # all maps share one normalizer and the sum dominates each part
        comp = _complete([[4, 0], [0, 0]], [[0, 0], [0, 2]], [[0, 1], [0, 0]])
        assert comp.complete_raw.max() == comp.correlation.raw.max()
        out = ev.completeness_coverage(comp, np.ones((2, 2)))
        assert out["correlation"] == out["counterfactual"] == out["contrastive"] == 0.25
        assert out["complete"] == 0.75
        assert out["complete"] >= max(out[p] for p in ex.PARADIGMS)

    def test_errors(self):
        z = np.zeros((2, 2))
        with pytest.raises(ValueError, match="empty mask"):
            ev.completeness_coverage(_complete(z, z, z), z)
        with pytest.raises(ValueError, match="threshold"):
            ev.completeness_coverage(_complete(z, z, z), np.ones((2, 2)), threshold=1.0)


class TestEvaluate:
    def test_report_shape(self, small_set):
        net, samples = small_set
        r = ev.evaluate(net, samples, ev.METHODS, steps=4, seed=3, config={"steps": 4})
        assert r.sample_count == len(samples) and r.seed == 3 and r.config == {"steps": 4}
        assert set(r.methods) == {"model"} | set(ev.METHODS)
        for name in ev.METHODS:
            m = r.methods[name]
            assert list(m) == sorted(m)
            assert set(m) == {"auc_gap", "coverage", "deletion_auc", "insertion_auc", "masked_accuracy", "pointing_game"}
            for k in ("coverage", "deletion_auc", "insertion_auc", "masked_accuracy", "pointing_game"):
                assert 0 <= m[k] <= 1
        assert r.methods["uniform"]["masked_accuracy"] == r.methods["model"]["accuracy"]
        assert r.methods["uniform"]["coverage"] == 1.0

    def test_threads_do_not_change_results(self, small_set):
        net, samples = small_set
        a = ev.evaluate(net, samples, ("correlation", "random"), steps=4, threads=0)
        b = ev.evaluate(net, samples, ("correlation", "random"), steps=4, threads=3)
        assert a == b

    def test_random_control_depends_on_seed(self, small_set):
        net, samples = small_set
        a = ev.evaluate(net, samples, ("random",), steps=4, seed=0)
        b = ev.evaluate(net, samples, ("random",), steps=4, seed=1)
        assert a.methods["random"] != b.methods["random"]

    def test_baseline_names(self, small_set):
        net, samples = small_set
        zeros = ev.evaluate(net, samples[:2], ("uniform",), steps=2, baseline="zeros")
        literal = ev.evaluate(net, samples[:2], ("uniform",), steps=2, baseline=0.0)
        assert zeros == literal
        with pytest.raises(ValueError, match="baseline"):
            ev.evaluate(net, samples, ("uniform",), baseline="median")

    def test_rejects_unknown_method_and_empty(self, small_set):
        net, samples = small_set
        with pytest.raises(ValueError, match="unknown methods"):
            ev.evaluate(net, samples, ("lime",))
        with pytest.raises(ValueError, match="no samples"):
            ev.evaluate(net, [], ("uniform",))


@pytest.mark.parametrize("value,want", [("", 0), ("4", 4), ("-2", 0), ("many", 0)])
def test_threads_from_env(monkeypatch, value, want):
    monkeypatch.setenv("CAMLAB_THREADS", value)
    assert ev.threads_from_env() == want
