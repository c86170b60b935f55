import os

import numpy as np
import pytest

from clenet import network
from clenet.network import (Architecture, ArchitectureError,
                            CheckpointChecksumError, CheckpointFormatError,
                            CheckpointVersionError, forward_baseline,
                            forward_enhanced, init_params, load_checkpoint,
                            predict, save_checkpoint)
from clenet.tensor import Rng


def micro(mode="enhanced", patch=12):
    return Architecture(patch_size=patch, conv1_filters=2, conv1_kernel=5,
                        conv2_filters=2, conv2_kernel=3, pool_window=2,
                        pool_stride=2, mode=mode)


def batch(rng, arch, n=2):
    p = arch.patch_size
    return rng.uniform_array(n * p * p, 0.0, 1.0).reshape(n, 1, p, p)


class TestArchitecture:
    def test_default_dims_chain(self):
        d = Architecture().stage_dims()
        assert d == {"input": 64, "conv1": 60, "pool1": 20, "conv2": 18, "pool2": 6}

    def test_code_smaller_than_patch(self):
        a = Architecture()
        assert a.code_elements == 32 * 36
        assert a.code_elements < a.patch_size**2

    def test_dimension_claim_asserted_at_construction(self):
        # stride-2 pooling at patch 64 inflates the code past the input size
        with pytest.raises(ArchitectureError):
            Architecture(pool_stride=2)

    def test_degenerate_stage_rejected(self):
        with pytest.raises(ArchitectureError):
            Architecture(patch_size=16)

    def test_param_counts_add_up(self):
        counts = Architecture().param_counts()
        assert counts["enhanced"] == counts["baseline"] + counts["decoder"]


class TestForward:
    def test_zero_input_zero_biases_gives_even_probs(self):
        arch = micro("baseline")
        params = init_params(arch, Rng(1))
        for t in (params.conv1.b, params.conv2.b, params.head.b):
            t[:] = 0.0
        x = np.zeros((3, 1, arch.patch_size, arch.patch_size))
        tr = forward_baseline(x, params)
        np.testing.assert_allclose(tr.probs, 0.5)

    def test_probs_sum_to_one(self):
        arch = micro("enhanced")
        params = init_params(arch, Rng(2))
        tr = forward_enhanced(batch(Rng(3), arch, 4), params)
        np.testing.assert_allclose(tr.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_identical_patches_identical_rows(self):
        arch = micro("baseline")
        params = init_params(arch, Rng(4))
        one = batch(Rng(5), arch, 1)
        x = np.concatenate([one] * 3)
        tr = forward_baseline(x, params)
        assert (tr.probs == tr.probs[0]).all()

    def test_reconstruction_shape_matches_input(self):
        for patch in range(16, 97, 8):
            try:
                arch = Architecture(patch_size=patch, mode="enhanced")
            except ArchitectureError:
                continue
            params = init_params(arch, Rng(6))
            x = batch(Rng(7), arch, 1)
            tr = forward_enhanced(x, params, train=True)
            assert tr.x_hat.shape == x.shape

    def test_perfect_inverse_surrogate_reduces_to_baseline(self):
        arch = micro("enhanced")
        params = init_params(arch, Rng(8))
        x = batch(Rng(9), arch, 2)
        tr = forward_enhanced(x, params, train=True, reconstruction_override=x)
        assert (np.asarray(tr.zp) == np.asarray(tr.z)).all()
        base = forward_baseline(x, params, train=True)
        assert (np.asarray(tr.logits) == np.asarray(base.logits)).all()

    def test_zero_decoder_reconstructs_nothing(self):
        arch = micro("enhanced")
        params = init_params(arch, Rng(10))
        params.deconv1.w[:] = 0
        params.deconv1.b[:] = 0
        params.deconv2.w[:] = 0
        params.deconv2.b[:] = 0
        x = batch(Rng(11), arch, 2)
        tr = forward_enhanced(x, params, train=True)
        assert (tr.x_hat == 0).all()
        zero_tr = forward_enhanced(np.zeros_like(x), params, train=True,
                                   reconstruction_override=np.zeros_like(x))
        assert (np.asarray(tr.zp) == np.asarray(zero_tr.zp)).all()

    def test_activations_finite_over_seeds(self):
        arch = micro("enhanced")
        for seed in range(20):
            params = init_params(arch, Rng(seed))
            tr = forward_enhanced(batch(Rng(seed + 100), arch, 2), params, train=True)
            for name, act in tr.stages().items():
                assert np.isfinite(act).all(), name

    def test_inference_trace_is_lean(self):
        arch = micro("enhanced")
        params = init_params(arch, Rng(12))
        tr = forward_enhanced(batch(Rng(13), arch, 1), params, train=False)
        assert tr.z is None and tr.cols1 is None and tr.probs is not None

    def test_bad_input_shape(self):
        arch = micro("baseline")
        params = init_params(arch, Rng(14))
        with pytest.raises(ValueError):
            forward_baseline(np.zeros((1, 1, 8, 8)), params)

    def test_predict_in_unit_interval_and_deterministic(self):
        arch = micro("enhanced")
        params = init_params(arch, Rng(15))
        x = batch(Rng(16), arch, 4)
        p1, p2 = predict(x, params), predict(x, params)
        assert (p1 >= 0).all() and (p1 <= 1).all()
        assert (p1 == p2).all()


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        params = init_params(micro(), Rng(17))
        params.adam_t = 5
        for k in params.adam_m:
            params.adam_m[k] += 0.25
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(params, a)
        save_checkpoint(load_checkpoint(a), b)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_truncated_file_is_checksum_error(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(init_params(micro(), Rng(18)), path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_bad_magic_is_format_error(self, tmp_path):
        path = str(tmp_path / "d.ckpt")
        open(path, "wb").write(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch_error(self, tmp_path):
        path = str(tmp_path / "e.ckpt")
        save_checkpoint(init_params(micro(), Rng(19)), path)
        raw = bytearray(open(path, "rb").read())
        raw[8] = 99  # version field
        import zlib

        raw[-4:] = zlib.crc32(bytes(raw[:-4])).to_bytes(4, "little")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(network.CheckpointIOError):
            load_checkpoint(str(tmp_path / "missing.ckpt"))

    def test_round_trip_preserves_predictions_bitwise(self, tmp_path):
        arch = micro("enhanced")
        params = init_params(arch, Rng(20))
        x = batch(Rng(21), arch, 3)
        before = predict(x, params)
        path = str(tmp_path / "f.ckpt")
        save_checkpoint(params, path)
        after = predict(x, load_checkpoint(path))
        assert (before == after).all()
