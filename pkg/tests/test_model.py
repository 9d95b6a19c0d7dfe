"""Model assembly: shapes, copy mode, loss values, training determinism, and
the weight container format."""

import math

import numpy as np
import pytest

from beyondfov import geometry as G
from beyondfov import model as M
from beyondfov import synthetic as S
from beyondfov import tensor as T


def small_cfg(**kw):
    defaults = dict(height=32, width=32, patch=4, widths=(8, 16, 32, 64),
                    depths=(1, 1, 1, 1), heads=(1, 2, 2, 2), window=2,
                    num_classes=S.NUM_CLASSES, n_mask=1, pca_direction="Bi",
                    seed=11)
    defaults.update(kw)
    return M.ModelConfig(**defaults)


def fov_for(cfg, radius_frac=0.47):
    return G.circular_mask(cfg.width, cfg.height,
                           ((cfg.width - 1) / 2, (cfg.height - 1) / 2),
                           radius_frac * min(cfg.height, cfg.width))


def rand_image(cfg, seed=0):
    return np.random.default_rng(seed).random(
        (cfg.height, cfg.width, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# config

def test_config_shape_example():
    cfg = M.ModelConfig(height=64, width=64, patch=4,
                        widths=(32, 64, 128, 256), heads=(1, 2, 4, 8),
                        num_classes=8, n_mask=4)
    assert [cfg.stage_grid(i) for i in range(4)] == \
        [(16, 16), (8, 8), (4, 4), (2, 2)]
    w = M.init_weights(cfg)
    mask = fov_for(cfg)
    rgb, logits = M.forward(rand_image(cfg), mask, cfg, w)
    assert rgb.shape == (64, 64, 3)
    assert logits.shape == (64, 64, 8)


def test_config_rejects_indivisible_input():
    with pytest.raises(ValueError, match="divisible"):
        M.ModelConfig(height=60, width=64)


def test_config_rejects_non_doubling_widths():
    with pytest.raises(ValueError, match="double"):
        M.ModelConfig(widths=(32, 64, 96, 128))


def test_config_rejects_bad_direction():
    with pytest.raises(ValueError, match="pca_direction"):
        M.ModelConfig(pca_direction="both")


def test_config_rejects_mask_count_beyond_deepest_tokens():
    with pytest.raises(ValueError, match="n_mask"):
        small_cfg(n_mask=2)  # 32x32 at patch 4 leaves a single deep token


def test_output_shape_property_over_configs():
    for cfg in (small_cfg(), small_cfg(pca_direction="P2S", seed=1),
                small_cfg(height=64, width=32, num_classes=3, seed=2),
                small_cfg(height=64, width=64, window=4, n_mask=2, seed=3)):
        w = M.init_weights(cfg)
        rgb, logits = M.forward(rand_image(cfg), fov_for(cfg), cfg, w)
        assert rgb.shape == (cfg.height, cfg.width, 3)
        assert logits.shape == (cfg.height, cfg.width, cfg.num_classes)


# ---------------------------------------------------------------------------
# forward behavior

def test_forward_deterministic():
    cfg = small_cfg()
    w = M.init_weights(cfg)
    x, mask = rand_image(cfg, 3), fov_for(cfg)
    a = M.forward(x, mask, cfg, w)
    b = M.forward(x, mask, cfg, w)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_copy_mode_pastes_input_inside_fov():
    cfg = small_cfg()
    w = M.init_weights(cfg)
    x, mask = rand_image(cfg, 4), fov_for(cfg)
    rgb, _ = M.forward(x, mask, cfg, w)
    inside = mask.data.astype(bool)
    assert np.array_equal(rgb.data[inside], x[inside])


def test_forward_rejects_wrong_input_shape():
    cfg = small_cfg()
    w = M.init_weights(cfg)
    with pytest.raises(ValueError, match="input shape"):
        M.forward(np.zeros((16, 16, 3), np.float32), fov_for(cfg), cfg, w)


def test_forward_rejects_mismatched_weights():
    cfg = small_cfg()
    w = M.init_weights(cfg)
    dropped = dict(w)
    dropped.pop("seg.cls.bias")
    dropped["rogue"] = T.Tensor(np.zeros(3, np.float32))
    with pytest.raises(M.WeightMismatchError) as exc:
        M.forward(rand_image(cfg), fov_for(cfg), cfg, dropped)
    assert "seg.cls.bias" in str(exc.value)
    assert "rogue" in str(exc.value)


def test_weight_names_are_pure_function_of_config():
    names_a = list(M.expected_shapes(small_cfg(seed=1)))
    names_b = list(M.expected_shapes(small_cfg(seed=99)))
    assert names_a == names_b
    assert list(M.init_weights(small_cfg())) == names_a


def test_init_deterministic_from_seed():
    a = M.init_weights(small_cfg(seed=5))
    b = M.init_weights(small_cfg(seed=5))
    c = M.init_weights(small_cfg(seed=6))
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


# ---------------------------------------------------------------------------
# loss

def test_loss_perfect_rgb_leaves_only_cross_entropy():
    cfg = small_cfg()
    rng = np.random.default_rng(8)
    rgb = T.Tensor(rng.random((8, 8, 3)).astype(np.float32))
    labels = rng.integers(0, 4, (8, 8))
    logits = T.Tensor(np.zeros((8, 8, 4), np.float32))
    total = M.loss(rgb, logits, T.Tensor(rgb.data.copy()), labels)
    # uniform logits: cross-entropy is exactly ln K; L1 term is zero
    assert total.item() == pytest.approx(math.log(4), abs=1e-5)


def test_loss_uniform_logits_is_log_k_plus_l1():
    rgb = T.Tensor(np.zeros((4, 4, 3), np.float32))
    gt = T.Tensor(np.full((4, 4, 3), 0.5, np.float32))
    labels = np.zeros((4, 4), np.int64)
    logits = T.Tensor(np.zeros((4, 4, 6), np.float32))
    total = M.loss(rgb, logits, gt, labels)
    assert total.item() == pytest.approx(0.5 + math.log(6), abs=1e-5)


def test_loss_rejects_out_of_range_labels():
    rgb = T.Tensor(np.zeros((4, 4, 3), np.float32))
    logits = T.Tensor(np.zeros((4, 4, 3), np.float32))
    with pytest.raises(ValueError, match="out of range"):
        M.loss(rgb, logits, rgb, np.full((4, 4), 7))


def test_loss_l1_gradient_is_scaled_sign():
    rng = np.random.default_rng(9)
    gt = rng.random((4, 4, 3)).astype(np.float32)
    labels = np.zeros((4, 4), np.int64)
    logits = T.Tensor(np.zeros((4, 4, 2), np.float32))
    pred = T.Tensor(rng.random((4, 4, 3)).astype(np.float32), requires_grad=True)
    with T.Tape() as tape:
        total = M.loss(pred, logits, gt, labels)
    tape.backward(total)
    expected = np.sign(pred.data - gt) / pred.data.size
    assert np.allclose(pred.grad, expected, atol=1e-7)


# ---------------------------------------------------------------------------
# training

def test_train_lr_zero_keeps_weights_and_flat_curve():
    cfg = small_cfg()
    data = S.toy_dataset(2, height=32, width=32, seed=1)
    before = {n: t.data.copy() for n, t in M.init_weights(cfg).items()}
    w, curve = M.train_toy(data, cfg, steps=3, lr=0.0)
    assert all(np.array_equal(w[n].data, before[n]) for n in w)
    assert curve[0] == curve[1] == curve[2]


def test_train_same_seed_same_curve():
    cfg = small_cfg()
    data = S.toy_dataset(2, height=32, width=32, seed=2)
    _, curve_a = M.train_toy(data, cfg, steps=4, lr=1e-3)
    _, curve_b = M.train_toy(data, cfg, steps=4, lr=1e-3)
    assert curve_a == curve_b


def test_train_empty_dataset_rejected():
    with pytest.raises(ValueError, match="at least one"):
        M.train_toy([], small_cfg(), steps=1, lr=1e-3)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_train_divergence_aborts_with_step():
    cfg = small_cfg()
    data = S.toy_dataset(1, height=32, width=32, seed=3)
    with pytest.raises(M.TrainingDivergedError) as exc:
        M.train_toy(data, cfg, steps=20, lr=1e12)
    assert exc.value.step <= 20


def test_monotone_overfit_four_samples():
    # seeded 500-step run must cut the loss to below a fifth of the start
    cfg = small_cfg(seed=0)
    data = S.toy_dataset(4, height=32, width=32, seed=4)
    _, curve = M.train_toy(data, cfg, steps=500, lr=2e-3)
    assert curve[-1] < 0.2 * curve[0]


# ---------------------------------------------------------------------------
# serialization

def test_save_load_roundtrip_bit_exact(tmp_path):
    cfg = small_cfg()
    w = M.init_weights(cfg)
    path = tmp_path / "w.fdw"
    M.save_weights(path, w)
    loaded = M.load_weights(path, expected=M.expected_shapes(cfg))
    assert set(loaded) == set(w)
    for n in w:
        assert np.array_equal(loaded[n].data, w[n].data)


def test_save_load_save_byte_identical(tmp_path):
    w = M.init_weights(small_cfg())
    p1, p2 = tmp_path / "a.fdw", tmp_path / "b.fdw"
    M.save_weights(p1, w)
    M.save_weights(p2, M.load_weights(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.fdw"
    w = M.init_weights(small_cfg())
    M.save_weights(p, w)
    blob = bytearray(p.read_bytes())
    blob[:4] = b"NOPE"
    p.write_bytes(bytes(blob))
    with pytest.raises(M.WeightFormatError, match="magic"):
        M.load_weights(p)


def test_load_rejects_truncation_with_offset(tmp_path):
    p = tmp_path / "trunc.fdw"
    M.save_weights(p, M.init_weights(small_cfg()))
    blob = p.read_bytes()
    p.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(M.WeightFormatError, match="truncated") as exc:
        M.load_weights(p)
    assert exc.value.offset <= len(blob) // 2


def test_load_rejects_unknown_tensor_name(tmp_path):
    p = tmp_path / "alien.fdw"
    M.save_weights(p, {"alien.weight": T.Tensor(np.zeros((2, 2), np.float32))})
    with pytest.raises(M.WeightFormatError, match="unknown tensor name"):
        M.load_weights(p, expected=M.expected_shapes(small_cfg()))


def test_load_rejects_wrong_shape(tmp_path):
    cfg = small_cfg()
    w = M.init_weights(cfg)
    w["embed.bias"] = T.Tensor(np.zeros(7, np.float32), requires_grad=True)
    p = tmp_path / "drift.fdw"
    M.save_weights(p, w)
    with pytest.raises(M.WeightFormatError, match="shape"):
        M.load_weights(p, expected=M.expected_shapes(cfg))


def test_loaded_weights_reproduce_forward(tmp_path):
    cfg = small_cfg()
    w = M.init_weights(cfg)
    x, mask = rand_image(cfg, 12), fov_for(cfg)
    rgb_a, logits_a = M.forward(x, mask, cfg, w)
    p = tmp_path / "w.fdw"
    M.save_weights(p, w)
    w2 = M.load_weights(p, expected=M.expected_shapes(cfg))
    rgb_b, logits_b = M.forward(x, mask, cfg, w2)
    assert np.array_equal(rgb_a.data, rgb_b.data)
    assert np.array_equal(logits_a.data, logits_b.data)
