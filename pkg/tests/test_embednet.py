import numpy as np
import pytest

from retrieval_lab import diffcore as dc
from retrieval_lab import losses as L
from retrieval_lab.diffcore import DimensionError
from retrieval_lab.embednet import (
    EmbeddingNet,
    extend_classifier,
    load_params,
    parameter_distance,
    save_params,
    snapshot,
)
from retrieval_lab.trainer import AdamState, adam_step


@pytest.fixture
def net():
    return EmbeddingNet.create(6, [0, 1, 2], feature_dim=4, hidden=(8, 8), seed=3)


class TestForward:
    def test_shapes_and_structure(self, net):
        feats, logits = net.forward(np.zeros((5, 6)))
        assert feats.shape == (5, 4) and logits.shape == (5, 3)
        assert net.n_layers == 3 and net.in_dim == 6 and net.feature_dim == 4
        assert net.groups()["head"] == ["head.W", "head.b"]
        assert net.parameter_count() == 6 * 8 + 8 + 8 * 8 + 8 + 8 * 4 + 4 + 4 * 3 + 3

    def test_zero_head_gives_zero_logits(self, rng):
        z = EmbeddingNet.create(6, [0, 1], zero_head=True)
        assert np.all(z.forward(rng.normal(size=(4, 6)))[1].data == 0.0)

    def test_batch_independence(self, net, rng):
        x = rng.normal(size=(7, 6))
        full = net.features(x)
        # BLAS may pick a different kernel for a single row, so allow ulp noise
        for i in range(7):
            np.testing.assert_allclose(net.features(x[i:i + 1])[0], full[i], rtol=1e-12, atol=1e-14)

    def test_graph_and_numpy_paths_agree(self, net, rng):
        x = rng.normal(size=(5, 6))
        f, lg = net.forward(x)
        assert np.array_equal(f.data, net.features(x))
        assert np.array_equal(lg.data, net.forward(x)[1].data)

    def test_width_mismatch(self, net):
        with pytest.raises(DimensionError, match=r"\(2, 5\)"):
            net.forward(np.zeros((2, 5)))
        with pytest.raises(DimensionError):
            net.features(np.zeros((2, 7)))

    def test_head_mismatch(self, net):
        arrays = net.arrays()
        with pytest.raises(DimensionError):
            EmbeddingNet(arrays, [0, 1])

    def test_seeded_creation_deterministic(self):
        a = EmbeddingNet.create(6, [0, 1], seed=11)
        b = EmbeddingNet.create(6, [0, 1], seed=11)
        assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


class TestSnapshot:
    def test_bit_identical_forward(self, net, rng):
        snap = snapshot(net)
        for _ in range(10):
            x = rng.normal(size=(int(rng.integers(1, 9)), 6))
            f, lg = net.forward(x)
            sf, slg = snap.forward(x)
            assert f.data.tobytes() == sf.data.tobytes()
            assert lg.data.tobytes() == slg.data.tobytes()

    def test_immune_to_later_mutation(self, net, rng):
        snap = snapshot(net)
        x = rng.normal(size=(3, 6))
        before = snap.features(x).copy()
        for p in net.params.values():
            p.data += 1.0
        np.testing.assert_array_equal(snap.features(x), before)

    def test_read_only(self, net):
        snap = snapshot(net)
        with pytest.raises(ValueError):
            snap.arrays()["head.W"][0, 0] = 1.0

    def test_outputs_carry_no_gradient(self, net, rng):
        feats, logits = snapshot(net).forward(rng.normal(size=(2, 6)))
        assert not feats.requires_grad and not logits.requires_grad

    def test_idempotent(self, net):
        a = snapshot(net)
        b = snapshot(a.thaw())
        assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())
        assert parameter_distance(a, b) == 0.0

    def test_distance_grows_after_step(self, net, rng):
        snap = snapshot(net)
        assert parameter_distance(net, snap) == 0.0
        state = AdamState()
        lr = {k: 1e-2 for k in net.params}
        dists = []
        for _ in range(3):
            net.zero_grad()
            feats, _ = net.forward(rng.normal(size=(4, 6)))
            dc.sum(dc.square(feats)).backward()
            adam_step(net.params, state, lr)
            dists.append(parameter_distance(net, snap))
        assert 0 < dists[0] < dists[1] < dists[2]

    def test_distance_shape_mismatch(self, net):
        with pytest.raises(DimensionError):
            parameter_distance(net, extend_classifier(net, [9]))


class TestExtend:
    def test_zero_new_classes_forbidden(self, net):
        with pytest.raises(ValueError):
            extend_classifier(net, [])

    def test_known_class_forbidden(self, net):
        with pytest.raises(ValueError, match=r"\[1\]"):
            extend_classifier(net, [1, 7])

    def test_first_logits_bit_identical(self, net, rng):
        wide = extend_classifier(net, [3])
        x = rng.normal(size=(6, 6))
        assert wide.forward(x)[1].data[:, :3].tobytes() == net.forward(x)[1].data.tobytes()
        assert wide.forward(x)[0].data.tobytes() == net.forward(x)[0].data.tobytes()

    def test_full_scale_head_shape(self):
        base = EmbeddingNet.create(8, list(range(100)), feature_dim=512, hidden=(16,))
        wide = extend_classifier(base, list(range(100, 200)))
        assert wide.params["head.W"].shape == (512, 200)
        assert wide.class_ids == list(range(200))

    def test_original_net_untouched(self, net):
        before = net.arrays()["head.W"].copy()
        extend_classifier(net, [3, 4])
        np.testing.assert_array_equal(net.arrays()["head.W"], before)

    def test_restricted_ce_leaves_old_rows_without_gradient(self, net, rng):
        wide = extend_classifier(net, [3, 4])
        _, logits = wide.forward(rng.normal(size=(4, 6)))
        L.cross_entropy_new_classes(dc.slice_cols(logits, 3, 5), [0, 1, 1, 0]).backward()
        np.testing.assert_array_equal(wide.params["head.W"].grad[:, :3], 0.0)
        np.testing.assert_array_equal(wide.params["head.b"].grad[:3], 0.0)
        assert np.all(wide.params["head.b"].grad[3:] != 0)


class TestParamFile:
    def test_round_trip(self, net, tmp_path):
        path = tmp_path / "net.incr"
        save_params(net, path)
        back = load_params(path)
        assert back.class_ids == net.class_ids
        for k, v in net.arrays().items():
            assert back.arrays()[k].tobytes() == v.tobytes()
        assert path.read_bytes()[:4] == b"INCR"

    def test_snapshot_saves_too(self, net, tmp_path):
        save_params(snapshot(net), tmp_path / "s.incr")
        assert parameter_distance(load_params(tmp_path / "s.incr"), net) == 0.0

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="not an INCR"):
            load_params(tmp_path / "x")

    def test_truncated(self, net, tmp_path):
        path = tmp_path / "net.incr"
        save_params(net, path)
        raw = path.read_bytes()
        for cut in (6, 20, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(ValueError, match=str(path)):
                load_params(path)

    def test_trailing_bytes(self, net, tmp_path):
        path = tmp_path / "net.incr"
        save_params(net, path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_params(path)
