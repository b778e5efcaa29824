import math

import numpy as np
import pytest
import torch

from deepstamp import dataio, nets, training
from deepstamp.dataio import ImageBatch
from deepstamp.errors import NumericalAbort, SpecError
from deepstamp.training import ClassifierConfig, StamperConfig

from conftest import random_batch


def kl_scalar(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


def softmax(z):
    e = [math.exp(v) for v in z]
    return [v / sum(e) for v in e]


# -- l_f ----------------------------------------------------------------------


def test_kl_two_class_toy():
    got = training.kl_predictions(torch.tensor([[0.0, math.log(3)]]), torch.tensor([[0.0, 0.0]]))
    expected = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
    assert expected == pytest.approx(0.1308, abs=1e-4)
    assert float(got) == pytest.approx(expected, abs=1e-7)


def test_kl_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 10)), rng.standard_normal((5, 10))
    got = float(training.kl_predictions(torch.from_numpy(a), torch.from_numpy(b)))
    ref = np.mean([kl_scalar(softmax(x), softmax(y)) for x, y in zip(a, b)])
    assert got == pytest.approx(ref, abs=1e-10)


def test_loss_f_zero_on_identical_inputs_and_nonnegative():
    f = nets.build("F-small", 0)
    x = torch.from_numpy(random_batch(4).data)
    assert float(training.loss_f(f, x, x.clone())) == pytest.approx(0.0, abs=1e-7)
    other = torch.from_numpy(random_batch(4, seed=9).data)
    assert float(training.loss_f(f, x, other)) >= 0.0
    assert float(training.loss_f(f, x, other, mode="hard")) >= 0.0


def test_loss_f_leaves_classifier_without_gradient():
    f = nets.build("F-small", 0)
    x = torch.from_numpy(random_batch(2).data)
    xp = (x * 0.5).requires_grad_(True)
    training.loss_f(f, x, xp).backward()
    assert xp.grad is not None
    assert all(t.grad is None and not t.requires_grad for t in f.tensors.values())


# -- l_v ----------------------------------------------------------------------


def test_loss_v_identity_cases():
    w = torch.rand(4, 32, 32) * 0.8
    same = w.expand(3, -1, -1, -1)
    assert float(training.loss_v(None, w, same)) == 0.0
    assert float(training.loss_v(None, w, same + 0.1)) == pytest.approx(0.01, rel=1e-5)


def test_loss_v_matches_scalar_loop():
    rng = np.random.default_rng(1)
    w, wp = rng.random((4, 3, 3)), rng.random((2, 4, 3, 3))
    ref = 0.0
    for i in range(2):
        acc = 0.0
        for c in range(4):
            for y in range(3):
                for x in range(3):
                    acc += (wp[i, c, y, x] - w[c, y, x]) ** 2
        ref += acc / (4 * 3 * 3)
    ref /= 2
    got = float(training.loss_v(None, torch.from_numpy(w), torch.from_numpy(wp)))
    assert got == pytest.approx(ref, abs=1e-12)


# -- l_d ----------------------------------------------------------------------


def zero_discriminator():
    d = nets.build("D", 0)
    d.tensors = {k: torch.zeros_like(v) for k, v in d.tensors.items()}
    return d


def test_loss_d_at_zero_logits():
    x = torch.rand(3, 3, 32, 32)
    d_loss, g_loss = training.loss_d(zero_discriminator(), x, x * 0.5)
    assert float(d_loss) == pytest.approx(math.log(2), abs=1e-6)
    assert float(g_loss) == pytest.approx(math.log(2), abs=1e-6)


def test_bce_at_saturation():
    real, fake = torch.full((4,), 20.0, dtype=torch.float64), torch.full((4,), -20.0, dtype=torch.float64)
    assert float(training.bce_pair(real, fake)) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert float(training.bce_pair(real, fake)) < 1e-8
    g = torch.nn.functional.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))
    assert float(g) == pytest.approx(20 + math.log1p(math.exp(-20)), rel=1e-9)


def test_loss_d_swap_symmetry():
    d = nets.build("D", 2)
    a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    ra, rb = nets.run(d, a), nets.run(d, b)
    d_loss, _ = training.loss_d(d, a, b)
    swapped = training.bce_pair(-rb, -ra)  # labels swapped == logits negated
    assert float(d_loss) == pytest.approx(float(training.bce_pair(ra, rb)), abs=1e-7)
    assert float(swapped) == pytest.approx(float(d_loss), abs=1e-6)


# -- total / GMAN ---------------------------------------------------------------


def test_total_loss_examples():
    assert training.total_loss(0.0, 0.0, 0.0) == 0.0
    assert training.total_loss(0.5, 0.25, 0.25) == 1.0
    assert training.total_loss(1.0, 2.0, 3.0, (0.0, 1.0, 0.5)) == 3.5


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_total_loss_rejects_non_finite(bad):
    with pytest.raises(NumericalAbort):
        training.total_loss(0.1, bad, 0.2)


def test_gman_aggregate_limits():
    losses = [torch.tensor(0.2), torch.tensor(1.0), torch.tensor(0.6)]
    assert float(training.gman_aggregate(losses[:1])) == pytest.approx(0.2)
    assert float(training.gman_aggregate(losses, tau=0)) == pytest.approx(1.0)
    assert float(training.gman_aggregate(losses, tau=1e6)) == pytest.approx(0.6, abs=1e-5)
    assert float(training.gman_aggregate(losses, tau=1e-3)) == pytest.approx(1.0, abs=1e-5)
    mid = float(training.gman_aggregate(losses, tau=1.0))
    assert 0.6 < mid < 1.0


# -- classifier training --------------------------------------------------------


def small_task(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    data = rng.random((n, 3, 32, 32), dtype=np.float32) * 0.3
    for i, y in enumerate(labels):
        data[i, y % 3, :, :] += 0.07 * y
    return ImageBatch(np.clip(data, 0, 1), labels)


def test_classifier_overfits_small_subset():
    params, report = training.train_classifier(
        small_task(), ClassifierConfig(epochs=150, batch_size=16, optimizer="adam", lr=2e-3, seed=0)
    )
    assert report[-1]["acc_train"] == 100.0
    logits = nets.predict_logits(params, small_task().data)
    assert training.accuracy(logits, small_task().labels) == 100.0


def test_zero_lr_keeps_parameters():
    params, _ = training.train_classifier(small_task(), ClassifierConfig(epochs=2, lr=0.0, seed=4))
    fresh = nets.build("F-small", 4)
    fresh.step = params.step
    assert params == fresh


def test_classifier_deterministic():
    cfg = ClassifierConfig(epochs=2, seed=9)
    a, _ = training.train_classifier(small_task(), cfg)
    b, _ = training.train_classifier(small_task(), cfg)
    assert dataio.encode_checkpoint(a) == dataio.encode_checkpoint(b)


def test_divergence_aborts_with_last_good():
    with pytest.raises(NumericalAbort) as err:
        training.train_classifier(small_task(), ClassifierConfig(epochs=3, lr=1e12, seed=0))
    assert err.value.last_good is not None


def test_accuracy_ties_go_to_lowest_class():
    logits = np.zeros((4, 10))
    assert training.accuracy(logits, np.array([0, 0, 1, 2])) == 50.0


# -- stamper training ------------------------------------------------------------


HW = (16, 16)


def stamper_setup(n=16):
    data = random_batch(n, seed=5, hw=HW)
    w = dataio.Watermark(np.full((3, *HW), 0.9, np.float32), np.ones((1, *HW), np.float32) * 0.8)
    f = nets.build("F-small", 1, HW)
    return data, w, f


def test_stamper_keeps_classifier_frozen():
    data, w, f = stamper_setup()
    before = dataio.encode_checkpoint(f)
    training.train_stamper(f, data, w, StamperConfig(steps=3, batch_size=8, seed=0))
    assert dataio.encode_checkpoint(f) == before


def test_zero_lambdas_keep_stamper():
    data, w, f = stamper_setup()
    cfg = StamperConfig(steps=3, batch_size=8, seed=0, lambdas=(0.0, 0.0, 0.0))
    state, _ = training.train_stamper(f, data, w, cfg)
    fresh = training.init_stamper(cfg, HW)
    assert all(torch.equal(state.w.tensors[k], fresh.w.tensors[k]) for k in fresh.w.tensors)
    # the discriminator still trains
    assert not all(torch.equal(state.ds[0].tensors[k], fresh.ds[0].tensors[k]) for k in fresh.ds[0].tensors)


def test_discriminator_learns_with_frozen_stamper():
    data, w, f = stamper_setup(n=16)
    cfg = StamperConfig(steps=100, batch_size=16, lr=0.0, lr_d=2e-4, seed=1)
    _, report = training.train_stamper(f, data, w, cfg)
    losses = [row["d_loss"] for row in report]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_stamper_report_rows_sum():
    data, w, f = stamper_setup()
    _, report = training.train_stamper(f, data, w, StamperConfig(steps=2, batch_size=8, seed=0))
    for row in report:
        assert row["l_tot"] == row["l_f"] + row["l_v"] + row["l_d"]


def test_stamper_deterministic_and_multi_discriminator():
    data, w, f = stamper_setup()
    cfg = StamperConfig(steps=4, batch_size=8, seed=3, n_discriminators=2, tau=0.5)
    a, _ = training.train_stamper(f, data, w, cfg)
    b, _ = training.train_stamper(f, data, w, cfg)
    assert len(a.ds) == 2
    for name in a.all():
        assert dataio.encode_checkpoint(a.all()[name]) == dataio.encode_checkpoint(b.all()[name])


def test_stamper_rejects_discriminator_count_mismatch():
    data, w, f = stamper_setup()
    state = training.init_stamper(StamperConfig(n_discriminators=1), HW)
    with pytest.raises(SpecError):
        training.train_stamper(f, data, w, StamperConfig(steps=1, n_discriminators=2), state=state)


def test_zero_discriminators_rejected_by_config():
    with pytest.raises(ValueError):
        StamperConfig(n_discriminators=0)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ClassifierConfig(epochz=3)


# -- gradient checks ------------------------------------------------------------


def test_grad_check_identity_autoencoder():
    assert training.grad_check("identity", "l_v", seed=0) < 1e-6


def test_grad_check_discriminator():
    assert training.grad_check("D", "d_loss", seed=0) < 1e-6


def test_grad_check_composed_total():
    assert training.grad_check("W", "total", seed=0) < 1e-5


def test_grad_check_unknown_path():
    with pytest.raises(SpecError):
        training.grad_check("D", "l_f")
