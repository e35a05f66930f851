import numpy as np
import pytest

from _oracles import central_diff, explicit_masked_ce, relative_error
from gridloc.model import (
    ModelConfig,
    ModelParams,
    embed,
    embed_array,
    forward_loss,
    init_params,
    load_checkpoint,
    logits,
    masked_ce_loss,
    save_checkpoint,
)
from gridloc.numcore import GradTape, Tensor

TINY = ModelConfig(num_classes=12, point_widths=(3, 8, 8), embed_dim=4,
                   normalize=True, seed=3)


def tiny_cloud(n=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3)).astype(np.float32)


def test_init_is_deterministic():
    a = init_params(TINY)
    b = init_params(TINY)
    for (name_a, ta), (name_b, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert name_a == name_b
        assert np.array_equal(ta.data, tb.data)


def test_init_biases_zero_and_weights_bounded():
    params = init_params(TINY)
    for name, tensor in params.named_tensors():
        if name.endswith("_b"):
            assert np.array_equal(tensor.data, np.zeros_like(tensor.data))
        else:
            fan_in, fan_out = tensor.data.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(tensor.data).max() <= limit


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=4, embed_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=4, point_widths=(3,))


def test_embedding_is_permutation_invariant():
    params = init_params(TINY)
    cloud = tiny_cloud(32)
    base = embed_array(params, cloud)
    rng = np.random.default_rng(1)
    for _ in range(4):
        assert np.array_equal(embed_array(params, cloud[rng.permutation(32)]), base)


def test_embedding_is_duplication_invariant():
    params = init_params(TINY)
    cloud = tiny_cloud(10)
    assert np.array_equal(
        embed_array(params, np.vstack([cloud, cloud])), embed_array(params, cloud)
    )


def test_embedding_unit_norm_when_normalizing():
    params = init_params(TINY)
    norm = np.linalg.norm(embed_array(params, tiny_cloud(20)))
    assert norm == pytest.approx(1.0, abs=1e-6)


def test_embedding_not_normalized_when_off():
    cfg = ModelConfig(num_classes=12, point_widths=(3, 8, 8), embed_dim=4,
                      normalize=False, seed=3)
    params = init_params(cfg)
    norm = np.linalg.norm(embed_array(params, tiny_cloud(20)))
    assert abs(norm - 1.0) > 1e-4  # would be astronomically unlikely otherwise


def test_embed_rejects_bad_cloud_shape():
    params = init_params(TINY)
    with pytest.raises(ValueError):
        embed(params, np.zeros((5, 2), dtype=np.float32))


def test_logits_zero_embedding_gives_bias():
    params = init_params(TINY)
    params.decoder_b = Tensor(np.arange(12, dtype=np.float32))
    out = logits(params, Tensor(np.zeros(4, dtype=np.float32)))
    assert np.array_equal(out.data, params.decoder_b.data)


def test_logits_linearity_and_length():
    params = init_params(TINY)
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=4).astype(np.float32))
    b = Tensor(rng.normal(size=4).astype(np.float32))
    za = logits(params, a).data
    zb = logits(params, b).data
    zab = logits(params, Tensor(a.data + b.data)).data
    assert za.shape == (12,)
    assert np.allclose(zab, za + zb - params.decoder_b.data, atol=1e-5)


def test_loss_zero_when_mask_leaves_only_target():
    z = Tensor(np.array([0.3, -1.0, 2.0, 0.5]))
    loss = masked_ce_loss(z, 2, {0, 1, 3})
    assert float(loss.data) == 0.0


def test_loss_uniform_logits_is_log_c():
    z = Tensor(np.zeros(5))
    loss = masked_ce_loss(z, 3, set())
    assert float(loss.data) == pytest.approx(np.log(5.0), abs=1e-7)


def test_loss_matches_explicit_reduced_softmax():
    rng = np.random.default_rng(4)
    z = rng.normal(size=5) * 2
    loss = masked_ce_loss(Tensor(z), 0, {2, 3})
    assert float(loss.data) == pytest.approx(explicit_masked_ce(z, 0, {2, 3}), abs=1e-9)


def test_loss_rejects_masked_target():
    with pytest.raises(ValueError):
        masked_ce_loss(Tensor(np.zeros(4)), 1, {1, 2})


def test_loss_batch_against_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        c = int(rng.integers(2, 65))
        z = rng.normal(size=c) * rng.uniform(0.1, 4.0)
        n_mask = int(rng.integers(0, c - 1))
        masked = set(rng.choice(c, size=n_mask, replace=False).tolist())
        unmasked = [i for i in range(c) if i not in masked]
        target = int(rng.choice(unmasked))
        zt = Tensor(z)
        tape = GradTape()
        loss = masked_ce_loss(zt, target, masked, tape)
        assert float(loss.data) >= 0.0
        assert float(loss.data) == pytest.approx(
            explicit_masked_ce(z, target, masked), abs=1e-6
        )
        tape.backward(loss)
        for i in masked:
            assert zt.grad[i] == 0.0


def test_masking_neutrality_of_decoder_columns():
    # perturbing the decoder column of a masked class changes nothing
    params = init_params(TINY)
    cloud = tiny_cloud(16, seed=6)
    target, mask = 0, {4, 7}

    def run(p):
        tape = GradTape()
        loss = forward_loss(p, cloud, target, mask, tape)
        tape.backward(loss)
        grads = [None if t.grad is None else t.grad.copy() for t in p.tensors()]
        p.zero_grads()
        return float(loss.data), grads

    loss_a, grads_a = run(params)
    params.decoder_w.data[:, 4] += 3.21
    params.decoder_b.data[7] -= 1.0
    loss_b, grads_b = run(params)
    assert loss_a == loss_b
    for ga, gb in zip(grads_a, grads_b):
        assert np.array_equal(ga, gb)


def test_end_to_end_gradients_match_finite_differences():
    cloud = np.random.default_rng(7).normal(size=(16, 3))
    target, mask = 5, {1, 2, 11}
    params = init_params(TINY)
    # lift everything to float64 for the check
    for tensor in params.tensors():
        tensor.data = tensor.data.astype(np.float64)
    tape = GradTape()
    loss = forward_loss(params, cloud, target, mask, tape)
    tape.backward(loss)

    for name, tensor in params.named_tensors():
        analytic = tensor.grad
        if analytic is None:
            analytic = np.zeros_like(tensor.data)
        base = tensor.data

        def objective(values, tensor=tensor, base=base):
            tensor.data = values
            out = float(forward_loss(params, cloud, target, mask).data)
            tensor.data = base
            return out

        fd = central_diff(objective, base.copy(), eps=1e-6)
        err = relative_error(analytic, fd)
        assert err < 1e-3, f"{name}: relative error {err:.2e}"


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = init_params(TINY)
    path = tmp_path / "model.lnck"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.cfg == params.cfg
    for (na, ta), (nb, tb) in zip(params.named_tensors(), loaded.named_tensors()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    # saving again is byte-identical
    path2 = tmp_path / "model2.lnck"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.lnck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(path)
