import numpy as np
import pytest

from deepstamp import stamping
from deepstamp.dataio import ImageBatch, Watermark
from deepstamp.errors import DimensionError, SpecError
from deepstamp.stamping import StampSpec

from conftest import random_batch, random_watermark


def constant(value, n=1, hw=(4, 4)):
    return ImageBatch(np.full((n, 3, *hw), value, dtype=np.float32), np.zeros(n, dtype=int))


def opaque(rgb_value, hw=(4, 4)):
    return Watermark(np.full((3, *hw), rgb_value, dtype=np.float32), np.ones((1, *hw), dtype=np.float32))


def test_beta_zero_is_identity(batch):
    w = random_watermark()
    out = stamping.stamp(batch, w, 0.0)
    assert np.array_equal(out.data, batch.data)


@pytest.mark.parametrize("beta, expected", [(1.0, 0.8), (0.5, 0.5)])
def test_blend_values(beta, expected):
    out = stamping.stamp(constant(0.2), opaque(0.8), beta)
    assert np.allclose(out.data, expected, atol=1e-7)


def test_labels_untouched(batch):
    out = stamping.stamp(batch, random_watermark(), 0.7)
    assert np.array_equal(out.labels, batch.labels)


def test_dimension_mismatch(batch):
    with pytest.raises(DimensionError):
        stamping.stamp(batch, opaque(0.5, hw=(16, 16)), 0.5)


def test_static_identical_images_identical_outputs():
    x = ImageBatch(np.repeat(random_batch(1).data, 2, axis=0), [1, 2])
    out = stamping.stamp_static(x, random_watermark(), StampSpec(0.5))
    assert np.array_equal(out.data[0], out.data[1])


def test_static_equals_stamp(batch):
    w = random_watermark()
    assert np.array_equal(stamping.stamp_static(batch, w, StampSpec(0.5)).data, stamping.stamp(batch, w, 0.5).data)


def test_static_perturbation_field_has_no_cross_image_variance():
    # on a constant batch every image receives the same perturbation field
    x = constant(0.3, n=6, hw=(32, 32))
    out = stamping.stamp_static(x, random_watermark(), StampSpec(0.8))
    assert np.ptp(out.data - x.data, axis=0).max() == 0.0


def test_opacity_degenerate_ranges(batch):
    w = random_watermark()
    out, betas = stamping.stamp_opacity(batch, w, StampSpec(0.5, "opacity", (0.5, 0.5)))
    assert np.all(betas == 0.5)
    assert np.array_equal(out.data, stamping.stamp_static(batch, w, StampSpec(0.5)).data)
    out, _ = stamping.stamp_opacity(batch, w, StampSpec(0.5, "opacity", (0.0, 0.0)))
    assert np.array_equal(out.data, batch.data)


def test_opacity_seed_reproducible(batch):
    w = random_watermark()
    spec = StampSpec(0.5, "opacity", (0.3, 0.9), rng_seed=42)
    a, ba = stamping.stamp_opacity(batch, w, spec)
    b, bb = stamping.stamp_opacity(batch, w, spec)
    assert np.array_equal(ba, bb) and np.array_equal(a.data, b.data)
    assert np.all((ba >= 0.3) & (ba <= 0.9)) and len(set(ba.tolist())) == 4


def test_opacity_draws_are_chunk_independent():
    spec = StampSpec(0.5, "opacity", (0.3, 0.9), rng_seed=7)
    whole = stamping.draw_opacities(spec, 10)
    parts = np.concatenate([stamping.draw_opacities(spec, 4), stamping.draw_opacities(spec, 6, start=4)])
    assert np.array_equal(whole, parts)


def test_opacity_bad_range(batch):
    with pytest.raises(SpecError):
        stamping.stamp_opacity(batch, random_watermark(), StampSpec(0.5, "opacity", (0.9, 0.3)))


def test_default_opacity_range_scales_with_beta():
    assert StampSpec(0.5, "opacity").resolved_opacity() == pytest.approx((0.15, 0.5))


def test_displacement_zero_is_static(batch):
    w = random_watermark()
    out, offsets = stamping.stamp_displaced(batch, w, StampSpec(0.5, "displacement", displacement_range=(0, 0)))
    assert np.all(offsets == 0)
    assert np.array_equal(out.data, stamping.stamp_static(batch, w, StampSpec(0.5)).data)


def test_displacement_out_of_bounds(batch):
    with pytest.raises(SpecError):
        stamping.stamp_displaced(batch, random_watermark(), StampSpec(0.5, "displacement", displacement_range=(32, 0)))


def test_displacement_exposes_clean_column():
    # 4x4 fixture, full-coverage opaque watermark shifted right by one pixel
    rng = np.random.default_rng(0)
    x = ImageBatch(rng.random((1, 3, 4, 4), dtype=np.float32), [0])
    w = opaque(0.9)
    planes = stamping.shift_planes(w.rgba(), 1, 0)
    out = stamping.stamp_learned(x, planes[None], 1.0)
    assert np.array_equal(out.data[0, :, :, 0], x.data[0, :, :, 0])
    assert np.allclose(out.data[0, :, :, 1:], 0.9)


def test_shift_planes_directions():
    a = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    down = stamping.shift_planes(a, 0, 2)
    assert np.array_equal(down[0, 2:], a[0, :2]) and np.all(down[0, :2] == 0)
    left = stamping.shift_planes(a, -1, 0)
    assert np.array_equal(left[0, :, :3], a[0, :, 1:]) and np.all(left[0, :, 3] == 0)


def test_displacement_offsets_in_range(batch):
    spec = StampSpec(0.5, "displacement", displacement_range=(3, 2), rng_seed=1)
    offsets = stamping.draw_offsets(spec, 200)
    assert offsets[:, 0].min() == -3 and offsets[:, 0].max() == 3
    assert offsets[:, 1].min() == -2 and offsets[:, 1].max() == 2


def test_learned_collapse_and_single(batch):
    w = random_watermark()
    same = np.stack([w.rgba()] * len(batch))
    assert np.array_equal(stamping.stamp_learned(batch, same, 0.5).data, stamping.stamp(batch, w, 0.5).data)
    one = batch.subset(slice(0, 1))
    assert np.array_equal(stamping.stamp_learned(one, [w], 0.3).data, stamping.stamp(one, w, 0.3).data)


def test_learned_distinct_watermarks_vary():
    x = constant(0.3, n=4, hw=(32, 32))
    planes = np.random.default_rng(0).random((4, 4, 32, 32), dtype=np.float32)
    out = stamping.stamp_learned(x, planes, 0.5)
    assert np.var(out.data - x.data, axis=0).max() > 0


def test_learned_count_mismatch(batch):
    with pytest.raises(DimensionError):
        stamping.stamp_learned(batch, [random_watermark()], 0.5)


def test_apply_scheme_refuses_learned(batch, watermark):
    with pytest.raises(SpecError):
        stamping.apply_scheme(batch, watermark, StampSpec(0.5, "learned"))


def test_save_stamped_writes_sidecar(tmp_path, batch, watermark):
    out, draws = stamping.apply_scheme(batch, watermark, StampSpec(0.5, "opacity", rng_seed=3))
    stamping.save_stamped(out, tmp_path / "train.bin", {"draws": draws})
    assert (tmp_path / "train.bin").stat().st_size == 3073 * len(batch)
    assert "opacities" in (tmp_path / "train.json").read_text()
