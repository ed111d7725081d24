import numpy as np
import pytest
import torch

from conv2multi import gan
from conv2multi.gan import HyperParams, RecLoss
from conv2multi.imaging import I_MAX, Dataset, IntensityImage
from conv2multi.synthdata import SynthConfig, generate_dataset


@pytest.fixture(scope="module")
def tiny_set():
    return generate_dataset(SynthConfig(seed=3, image_size=16), 6)


def test_generator_shape_and_range():
    g = gan.build_generator(64, 8, seed=0)
    out = g(torch.zeros(1, 1, 64, 64))
    assert out.shape == (1, 1, 64, 64)
    assert (out.abs() < 1).all()
    x = torch.rand(2, 1, 64, 64) * 2 - 1
    assert g(x).shape == (2, 1, 64, 64)


@pytest.mark.parametrize("size, depth", [(16, 4), (64, 6), (256, 8)])
def test_generator_depth(size, depth):
    g = gan.UNetGenerator(size, 2)
    assert g.depth == depth and len(g.ups) == depth


def test_generator_widths_capped():
    g = gan.UNetGenerator(256, 4)
    assert g.widths == [4, 8, 16, 32, 32, 32, 32, 32]


def test_bottleneck_is_one_pixel():
    g = gan.build_generator(32, 4)
    x = torch.zeros(1, 1, 32, 32)
    for down in g.downs:
        x = down(x)
    assert x.shape[-2:] == (1, 1)


def test_generator_init_deterministic():
    a, b = gan.build_generator(32, 4, seed=7), gan.build_generator(32, 4, seed=7)
    c = gan.build_generator(32, 4, seed=8)
    pa, pb, pc = (torch.cat([p.flatten() for p in m.parameters()]) for m in (a, b, c))
    assert torch.equal(pa, pb) and not torch.equal(pa, pc)
    weights = torch.cat([m.weight.flatten() for m in a.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))])
    assert abs(weights.mean().item()) < 2e-3
    assert weights.std().item() == pytest.approx(0.02, rel=0.05)


@pytest.mark.parametrize("size, grid", [(256, 30), (64, 6), (32, 2), (16, 2)])
def test_discriminator_grid(size, grid):
    d = gan.build_discriminator(size, 2)
    real = d(torch.zeros(1, 1, size, size), torch.zeros(1, 1, size, size))
    fake = d(torch.zeros(1, 1, size, size), torch.ones(1, 1, size, size))
    assert real.shape == fake.shape == (1, 1, grid, grid)
    assert gan.patch_grid_size(size) == grid


@pytest.mark.parametrize("size", [15, 24, 8, 100])
def test_sizes_must_be_powers_of_two(size):
    with pytest.raises(gan.ImageSizeError):
        gan.build_generator(size, 4)
    with pytest.raises(gan.ImageSizeError):
        gan.build_discriminator(size, 4)


def test_reconstruction_loss_examples():
    a = np.zeros((4, 4))
    for kind in RecLoss:
        assert gan.reconstruction_loss(kind, a, a) == 0.0
    b = np.full((4, 4), 0.5)
    assert gan.reconstruction_loss("MAE", b, a) == 0.5
    assert gan.reconstruction_loss("MSE", b, a) == 0.25
    assert gan.reconstruction_loss("MAE_MSE_BLEND", b, a) == 0.375


def test_reconstruction_loss_blend_definition(rng):
    p, t = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    mae = gan.reconstruction_loss(RecLoss.MAE, p, t)
    mse = gan.reconstruction_loss(RecLoss.MSE, p, t)
    assert gan.reconstruction_loss(RecLoss.MAE_MSE_BLEND, p, t) == pytest.approx((mae + mse) / 2, abs=1e-12)
    with pytest.raises(ValueError):
        gan.reconstruction_loss(RecLoss.MSE, p, t[:2])


def test_hyperparams_enums_and_json():
    hp = HyperParams(optimizer="sgd", rec_loss="mae-mse-blend")
    assert hp.optimizer is gan.Optimizer.SGD and hp.rec_loss is RecLoss.MAE_MSE_BLEND
    assert HyperParams.from_json(hp.to_json()) == hp
    with pytest.raises(ValueError):
        HyperParams(optimizer="rmsprop")
    with pytest.raises(ValueError):
        HyperParams(learning_rate=0)


def _params(module):
    return torch.cat([p.detach().flatten().clone() for p in module.parameters()])


def test_train_step_updates_generator(tiny_set):
    state = gan.init_state(16, HyperParams(base_channels=4, seed=1))
    before = _params(state.generator)
    gan.train_step(state, list(tiny_set)[:2])
    assert not torch.equal(before, _params(state.generator))
    assert state.step == 1 and state.last.g_rec > 0


def test_train_step_without_reconstruction_weight(tiny_set):
    state = gan.init_state(16, HyperParams(base_channels=4, rec_weight=0.0))
    gan.train_step(state, [tiny_set[0]])
    assert state.last.g_rec > 0
    assert state.last.g_total == pytest.approx(state.last.g_adv)


def test_train_step_deterministic(tiny_set):
    hp = HyperParams(base_channels=4, seed=5, optimizer="SGD", learning_rate=0.01)
    a, b = gan.init_state(16, hp), gan.init_state(16, hp)
    for _ in range(2):
        gan.train_step(a, [tiny_set[1], tiny_set[2]])
        gan.train_step(b, [tiny_set[1], tiny_set[2]])
    assert torch.equal(_params(a.generator), _params(b.generator))
    assert torch.equal(_params(a.discriminator), _params(b.discriminator))


def test_train_step_rejects_bad_batches(tiny_set):
    state = gan.init_state(32, HyperParams(base_channels=4))
    with pytest.raises(ValueError):
        gan.train_step(state, [])
    with pytest.raises(gan.ImageSizeError):
        gan.train_step(state, [tiny_set[0]])


def test_train_step_count(tiny_set, monkeypatch):
    calls = []
    real = gan.train_step

    def counting(state, batch):
        calls.append(len(batch))
        return real(state, batch)

    monkeypatch.setattr(gan, "train_step", counting)
    gan.train(tiny_set, HyperParams(epochs=1, batch_size=3, base_channels=4))
    assert calls == [3, 3]
    calls.clear()
    gan.train(tiny_set.subset(range(5)), HyperParams(epochs=2, batch_size=2, base_channels=4))
    assert calls == [2, 2, 1, 2, 2, 1]


def test_epoch_batches_reshuffle():
    a = gan.epoch_batches(10, 3, seed=1, epoch=1)
    b = gan.epoch_batches(10, 3, seed=1, epoch=2)
    assert sorted(np.concatenate(a)) == list(range(10))
    assert [x.tolist() for x in a] == [x.tolist() for x in gan.epoch_batches(10, 3, 1, 1)]
    assert [x.tolist() for x in a] != [x.tolist() for x in b]


def test_train_without_eval_set(tiny_set):
    model, curve = gan.train(tiny_set, HyperParams(epochs=1, base_channels=4))
    assert len(curve) == 0
    assert model.image_size == 16


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        gan.train(Dataset((), 16), HyperParams(epochs=1))


def test_train_curve_deterministic(tiny_set):
    hp = HyperParams(epochs=3, batch_size=2, base_channels=4, seed=2)
    _, c1 = gan.train(tiny_set.subset([0, 1, 2, 3]), hp, tiny_set.subset([4, 5]))
    _, c2 = gan.train(tiny_set.subset([0, 1, 2, 3]), hp, tiny_set.subset([4, 5]))
    assert [e for e, _ in c1.entries] == [1, 2, 3]
    assert c1 == c2


def test_epoch_curve_validation():
    with pytest.raises(ValueError):
        gan.EpochCurve(((2, 1.0),))
    with pytest.raises(ValueError):
        gan.EpochCurve(((1, 1.0), (1, 2.0)))


def test_learning_signal():
    ds = generate_dataset(SynthConfig(seed=11, image_size=16), 4)
    model, _ = gan.train(ds, HyperParams(epochs=30, batch_size=2, base_channels=8, seed=3))
    totals = [s.g_total for s in model.loss_history]
    n = max(1, len(totals) // 10)
    assert np.mean(totals[-n:]) < np.mean(totals[:n])


def test_predict_contract(tiny_set):
    model, _ = gan.train(tiny_set.subset([0]), HyperParams(epochs=1, base_channels=4))
    conv = tiny_set[1].conv
    out = gan.predict(model, conv)
    assert out.shape == conv.shape
    assert out.values.min() >= 0 and out.values.max() <= I_MAX
    assert out == gan.predict(model, conv)
    with pytest.raises(gan.ImageSizeError):
        gan.predict(model, IntensityImage(np.zeros((32, 32))))


def test_checkpoint_round_trip(tiny_set, tmp_path):
    model, _ = gan.train(tiny_set.subset([0, 1]), HyperParams(epochs=1, base_channels=4))
    model.save(tmp_path / "ckpt")
    back = gan.GanModel.load(tmp_path / "ckpt")
    assert back.architecture_descriptor == model.architecture_descriptor
    assert back.hp == model.hp
    assert gan.predict(back, tiny_set[2].conv) == gan.predict(model, tiny_set[2].conv)


def _relu_inputs(modules):
    """Record every ReLU/LeakyReLU input during a forward pass."""
    seen = []
    handles = [
        m.register_forward_hook(lambda mod, inp, out: seen.append(inp[0].detach().clone()))
        for net in modules
        for m in net.modules()
        if isinstance(m, (torch.nn.ReLU, torch.nn.LeakyReLU))
    ]
    return seen, handles


def generator_gradient_check(size=16, base_channels=4, n_params=10, step=1e-3, seed=0):
    """Compare autograd against central differences on sampled generator parameters.

    A stencil whose perturbation flips the sign of any ReLU input straddles a kink,
    where central differences are not a valid oracle; such parameters are skipped
    and another is drawn. Taps that only ever see zero padding have an exactly zero
    gradient and are not eligible. Returns (worst relative error, skipped count).
    """
    hp = HyperParams(base_channels=base_channels, rec_loss="MSE")
    g = gan.build_generator(size, base_channels, seed=seed).double()
    d = gan.build_discriminator(size, base_channels, seed=seed + 1).double()
    pair = generate_dataset(SynthConfig(seed=seed, image_size=size), 1)[0]
    conv = gan.to_tensor([pair.conv], torch.float64)
    target = gan.to_tensor([pair.multi], torch.float64)

    def loss():
        return gan.generator_loss(g, d, conv, target, hp)[0]

    g.zero_grad()
    loss().backward()
    params = list(g.parameters())
    grads = torch.cat([p.grad.flatten() for p in params])
    bounds = np.cumsum([p.numel() for p in params])
    eligible = np.flatnonzero(grads.numpy() != 0)
    rng = np.random.default_rng(seed)

    worst, checked, skipped = 0.0, 0, 0
    for flat in rng.permutation(eligible):
        if checked == n_params:
            break
        which = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[which - 1] if which else 0))
        view = params[which].data.view(-1)
        orig = view[offset].item()
        seen, handles = _relu_inputs((g, d))
        with torch.no_grad():
            view[offset] = orig + step
            plus = loss().item()
            n_act = len(seen)
            view[offset] = orig - step
            minus = loss().item()
            view[offset] = orig
        for h in handles:
            h.remove()
        if any(((a > 0) != (b > 0)).any() for a, b in zip(seen[:n_act], seen[n_act:])):
            skipped += 1
            continue
        analytic = grads[flat].item()
        numeric = (plus - minus) / (2 * step)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        checked += 1
    assert checked == n_params
    return worst, skipped


def test_gradient_check():
    worst, skipped = generator_gradient_check()
    assert worst <= 1e-3
    assert skipped <= 30
