import struct
import zlib

import numpy as np
import pytest

from relpose.gradcheck import randomize_statistics
from relpose.layers import TRAIN, Tape
from relpose.model import (NO_DROP, PRESETS, DropMask, GroupConfig, ModelFileError, ModelSpec,
                           PoseModel, enumerate_pairs, load_model, mask_from_visibility,
                           parameter_count, preset, relational_weights, sample_drop, save_model)
from relpose.numerics import Rng
from relpose.skeleton import GROUPS, NormStats

from oracles import ref_forward

SMALL = dict(f_dim=10, g_dim=8, intra_dim=6)


def small_model(tag, seed=0, **kw):
    model = PoseModel(preset(tag, seed=seed, **{**SMALL, **kw}))
    randomize_statistics(model, Rng(seed).split("stats"))
    return model


class TestPairs:
    @pytest.mark.parametrize("n,expected", [
        (2, [(0, 1)]),
        (4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]),
    ])
    def test_enumeration(self, n, expected):
        assert enumerate_pairs(n) == expected

    def test_five_groups(self):
        pairs = enumerate_pairs(5)
        assert len(pairs) == 10 and pairs[0] == (0, 1) and pairs[-1] == (3, 4)

    def test_weights_no_drop(self):
        np.testing.assert_array_equal(relational_weights(5), np.full(10, 0.1))

    @pytest.mark.parametrize("g", range(5))
    def test_weights_one_drop(self, g):
        w = relational_weights(5, (g,))
        assert np.count_nonzero(w) == 6
        np.testing.assert_allclose(w[w > 0], 1 / 6, rtol=0, atol=1e-15)
        for (i, j), wij in zip(enumerate_pairs(5), w):
            assert (wij == 0) == (g in (i, j))

    def test_two_groups_dropping_one_leaves_nothing(self):
        np.testing.assert_array_equal(relational_weights(2, (0,)), [0.0])

    def test_group_config_round_trip(self):
        gc = GroupConfig()
        assert GroupConfig.from_text(gc.to_text()) == gc
        assert gc.n_pairs == 10 and len(gc.intra_pairs()) == 18

    def test_group_config_must_partition(self):
        with pytest.raises(ValueError):
            GroupConfig([(0, 1), (1, 2)], n_joints=3)


class TestSpec:
    def test_text_round_trip(self):
        spec = preset("RN-hier-drop", f_dim=33, seed=5)
        assert ModelSpec.from_text(spec.to_text()) == spec

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ModelSpec.from_text("variant=RN\nwidth=3\n")

    @pytest.mark.parametrize("kw", [
        dict(variant="CNN"), dict(variant="FC", group_pdrop=0.2),
        dict(variant="RN", joint_pdrop=0.1), dict(variant="RN", f_dropout=1.0),
        dict(variant="RN", input_dim=30),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelSpec(**kw)

    def test_tags(self):
        assert [preset(t).tag for t in PRESETS] == list(PRESETS)


class TestParameterCount:
    # frozen from the closed form; the default dimensions are the full-size ones
    FULL = {"FC": 16_961_581, "RN": 40_167_469, "RN-hier": 47_689_261}

    @pytest.mark.parametrize("tag", list(FULL))
    def test_full_size(self, tag):
        assert parameter_count(preset(tag)) == self.FULL[tag]

    @pytest.mark.parametrize("tag", list(PRESETS))
    def test_closed_form_matches_allocation(self, tag):
        spec = preset(tag, **SMALL, f_blocks=3, g_blocks=2, intra_blocks=2)
        assert PoseModel(spec).n_parameters() == parameter_count(spec)


class TestForward:
    @pytest.mark.parametrize("tag", ["FC", "FC-drop", "RN", "RN-hier"])
    def test_matches_reference_no_drop(self, tag):
        model = small_model(tag, f_blocks=2, g_blocks=2, intra_blocks=2)
        x = Rng(1).normal(0, 1, (6, 32))
        out = model.forward(x)
        for b in range(6):
            np.testing.assert_allclose(out[b], ref_forward(model, x[b]), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("tag", ["RN", "RN-hier"])
    def test_group_drop_is_omit_and_rescale(self, tag):
        model = small_model(tag)
        x = Rng(2).normal(0, 1, (5, 32))
        masks = [DropMask(groups=(g,)) for g in range(5)]
        out = model.forward(x, masks)
        for b in range(5):
            np.testing.assert_allclose(out[b], ref_forward(model, x[b], masks[b]),
                                       rtol=0, atol=1e-10)

    def test_two_group_drop_at_eval(self):
        model = small_model("RN")
        x = Rng(3).normal(0, 1, (1, 32))
        mask = DropMask(groups=(0, 3))
        np.testing.assert_allclose(model.forward(x, [mask])[0], ref_forward(model, x[0], mask),
                                   atol=1e-10)
        with pytest.raises(ValueError):
            model.forward(np.vstack([x, x]), [mask, NO_DROP], TRAIN, Rng(0))

    def test_hier_joint_drop(self):
        model = small_model("RN-hier")
        x = Rng(4).normal(0, 1, (3, 32))
        masks = [DropMask(joints=(5,)), DropMask(joints=(0,)), DropMask(groups=(2,), joints=(8,))]
        out = model.forward(x, masks)
        for b in range(3):
            np.testing.assert_allclose(out[b], ref_forward(model, x[b], masks[b]),
                                       rtol=0, atol=1e-12)

    def test_hier_group_without_pairs_rejected(self):
        model = small_model("RN-hier")
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 32)), [DropMask(joints=(4, 5))])

    def test_dropped_group_inputs_do_not_matter(self):
        model = small_model("RN")
        x = Rng(5).normal(0, 1, (1, 32))
        y = x.copy()
        for j in GROUPS[1]:
            y[0, 2 * j:2 * j + 2] = 99.0
        mask = [DropMask(groups=(1,))]
        np.testing.assert_array_equal(model.forward(x, mask), model.forward(y, mask))

    def test_pair_order_invariance(self):
        # permuting the pair modules together with their weights leaves the mean unchanged
        model = small_model("RN-hier")
        x = Rng(6).normal(0, 1, (4, 32))
        before = model.forward(x)
        perm = Rng(7).permutation(10)
        for block in model.g_blocks:
            for _, arr in list(block.parameters()) + list(block.buffers()):
                arr[...] = arr[perm]
        pi, pj = model._pi.copy(), model._pj.copy()
        model._pi, model._pj = pi[perm], pj[perm]
        assert np.max(np.abs(model.forward(x) - before)) < 1e-9

    def test_left_right_asymmetry(self):
        model = small_model("RN")
        x = Rng(8).normal(0, 1, (1, 32))
        pts = x.reshape(16, 2).copy()
        for a, b in [(4, 7), (5, 8), (6, 9), (10, 13), (11, 14), (12, 15)]:
            pts[[a, b]] = pts[[b, a]]
        assert np.max(np.abs(model.forward(pts.reshape(1, 32)) - model.forward(x))) > 1e-6

    def test_rejects_bad_input(self):
        model = small_model("FC")
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 31)))
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 32)), mode=TRAIN)

    def test_fc_drop_zeroes_whole_joints(self):
        model = small_model("FC-drop", f_dropout=0.0)
        model.set_bn_frozen(True)
        x = Rng(9).normal(0, 1, (64, 32))
        train_out = model.forward(x, None, TRAIN, Rng(9))
        # input zeroing is then the only stochastic element; rebuild it
        keep = Rng(9).split("input").random((64, 16)) >= 0.1
        assert 0.8 < keep.mean() < 1.0
        zeroed = x * np.repeat(keep, 2, axis=1)
        np.testing.assert_allclose(train_out, model.forward(zeroed), rtol=0, atol=1e-12)


class TestRelationalDropoutFree:
    def test_zero_rates_identical_to_rn(self):
        a = PoseModel(preset("RN", **SMALL))
        b = PoseModel(preset("RN-drop", **SMALL, group_pdrop=0.0))
        x = Rng(10).normal(0, 1, (4, 32))
        assert a.spec == b.spec
        np.testing.assert_array_equal(a.forward(x, None, TRAIN, Rng(1)),
                                      b.forward(x, None, TRAIN, Rng(1)))


class TestBackward:
    def test_dropped_pairs_get_zero_gradient(self):
        model = small_model("RN")
        model.set_bn_frozen(True)
        x = Rng(11).normal(0, 1, (3, 32))
        masks = [DropMask(groups=(0,))] * 3
        tape = Tape()
        out = model.forward(x, masks, TRAIN, Rng(0), tape)
        grads = model.backward(tape, np.ones_like(out))
        for p, (i, j) in enumerate(model.gc.pairs):
            g = grads[f"g.entry{p}.weight"]
            assert (not g.any()) == (0 in (i, j))
        assert not grads["g.block0.fc1.weight"][0].any()

    def test_tape_mismatch_detected(self):
        model = small_model("FC")
        tape = Tape()
        out = model.forward(np.zeros((2, 32)), None, TRAIN, Rng(0), tape)
        tape.push(object(), None)
        with pytest.raises(RuntimeError):
            model.backward(tape, np.ones_like(out))


class TestSampleDrop:
    def test_disabled_returns_none(self):
        assert sample_drop(Rng(0), preset("RN"), 4) is None
        assert sample_drop(Rng(0), preset("FC-drop"), 4) is None

    def test_group_frequency(self):
        masks = sample_drop(Rng(12), preset("RN-drop"), 100_000)
        dropped = [m.groups[0] for m in masks if m.groups]
        rate = len(dropped) / 1e5
        assert abs(rate - 0.2) < 0.01
        counts = np.bincount(dropped, minlength=5) / len(dropped)
        np.testing.assert_allclose(counts, 0.2, atol=0.01)
        assert all(not m.joints for m in masks)

    def test_hier_joint_drop_exclusive(self):
        masks = sample_drop(Rng(13), preset("RN-hier-drop"), 100_000)
        group = sum(1 for m in masks if m.groups)
        joint = sum(1 for m in masks if m.joints)
        assert not any(m.groups and m.joints for m in masks)
        assert abs(group / 1e5 - 0.2) < 0.01
        assert abs(joint / 1e5 - 0.8 * 0.1) < 0.01


class TestMaskFromVisibility:
    def vis(self, *missing):
        v = np.ones(16, dtype=bool)
        v[list(missing)] = False
        return v

    def test_fc_ignores(self):
        assert mask_from_visibility(self.vis(5), preset("FC")) == NO_DROP

    def test_rn_drops_whole_group(self):
        assert mask_from_visibility(self.vis(5), preset("RN-drop")) == DropMask(groups=(0,))

    def test_hier_single_joint(self):
        assert mask_from_visibility(self.vis(5), preset("RN-hier-drop")) == DropMask(joints=(5,))

    def test_hier_two_joints_same_group(self):
        m = mask_from_visibility(self.vis(4, 6), preset("RN-hier-drop"))
        assert m == DropMask(groups=(0,))

    def test_arm_missing(self):
        m = mask_from_visibility(self.vis(4, 5, 6), preset("RN-hier-drop"))
        assert m == DropMask(groups=(0,))

    def test_too_many_groups(self):
        with pytest.raises(ValueError):
            mask_from_visibility(self.vis(4, 7, 10, 13), preset("RN-drop"))


class TestModelFile:
    def make(self, tag="RN-hier-drop"):
        model = small_model(tag)
        model.stats = NormStats(Rng(1).normal(0, 1, (32,)), Rng(2).normal(0, 1, (45,)))
        return model

    @pytest.mark.parametrize("tag", list(PRESETS))
    def test_round_trip(self, tmp_path, tag):
        model = self.make(tag)
        path = tmp_path / "m.rlft"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.spec == model.spec
        for (n1, a1), (n2, a2) in zip(model.parameters(), loaded.parameters()):
            assert n1 == n2 and a1.tobytes() == a2.tobytes()
        for (_, a1), (_, a2) in zip(model.buffers(), loaded.buffers()):
            assert a1.tobytes() == a2.tobytes()
        x = Rng(3).normal(0, 1, (2, 32))
        np.testing.assert_array_equal(model.forward(x), loaded.forward(x))
        save_model(loaded, tmp_path / "again.rlft")
        assert path.read_bytes() == (tmp_path / "again.rlft").read_bytes()

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "m.rlft"
        save_model(self.make(), path)
        data = bytearray(path.read_bytes())
        data[100] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ModelFileError, match="CRC"):
            load_model(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.rlft"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ModelFileError, match="magic"):
            load_model(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.rlft"
        save_model(self.make(), path)
        body = bytearray(path.read_bytes()[:-4])
        body[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(ModelFileError, match="version"):
            load_model(path)

    def test_zero_weight_readout_outputs_bias(self, tmp_path):
        model = self.make("RN")
        model.readout.weight[...] = 0.0
        model.readout.bias[...] = np.arange(45.0)
        path = tmp_path / "m.rlft"
        save_model(model, path)
        out = load_model(path).forward(Rng(4).normal(0, 1, (3, 32)))
        np.testing.assert_array_equal(out, np.tile(np.arange(45.0), (3, 1)))
