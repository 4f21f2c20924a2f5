import numpy as np
import pytest
import torch

from semisam.network import BackboneConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(BackboneConfig.tiny(), seed=0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def random_blob(rng, shape=(16, 16, 16), n_seeds=3, smooth=2.0, level=0.55):
    """Smooth random mask with a few lumps; may be disconnected."""
    from scipy import ndimage

    field = ndimage.gaussian_filter(rng.random(shape), smooth)
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    return (field > level).astype(np.uint8)


def ball(shape, center, radius):
    zz, yy, xx = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return (d2 <= radius**2).astype(np.uint8)


SMALL_PHANTOMS = dict(
    n_cases=8, shape=(24, 24, 24), radius_range=(4.0, 6.0), center_jitter=2.0, m_labeled=2, n_test=2, seed=3
)


@pytest.fixture(scope="session")
def small_data_root(tmp_path_factory):
    """Eight 24^3 phantoms: 2 labeled, 4 unlabeled, 2 test."""
    from semisam.volumes import PhantomDatasetSpec, write_phantom_dataset

    root = tmp_path_factory.mktemp("phantoms")
    write_phantom_dataset(PhantomDatasetSpec(**SMALL_PHANTOMS), root)
    return root


def small_config(root, out, base="mt", variant="plain", **train):
    from semisam.config import config_from_dict

    raw = {
        "data": {"root": str(root), "m_labeled": 2, "n_test": 2, "seed": 3, "patch_shape": [16, 16, 16]},
        "framework": {"base": base, "variant": variant},
        "backbone": {"base_width": 4, "depth": 2},
        "train": {"t_max": 50, "eval_every": 1000, "checkpoint_every": 1000, "seed": 7, **train},
        "oracle": {"backend": "synthetic", "radius": 1, "flip_rate": 0.05},
        "output_dir": str(out),
    }
    return config_from_dict(raw)


def gradient_check(seed=0, n_coords=20, h=1e-3, size=16):
    """Compare autograd with central differences on random parameter coordinates.

    Returns the list of (analytic, numeric) pairs. Dropout masks are replayed
    from a saved generator state so every evaluation sees the same network.
    """
    from semisam.losses import consistency_loss, sam_consistency_loss, supervised_loss, total_objective
    from semisam.network import forward

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_model(BackboneConfig.tiny(), seed=seed, dtype=torch.float64)
    shape = (size,) * 3
    c = size // 2
    x = torch.randn(2, 1, *shape, dtype=torch.float64)
    y = torch.from_numpy(ball(shape, (c, c, c), size / 3).astype(np.int64))[None]
    teacher_pm = torch.softmax(torch.randn(1, 2, *shape, dtype=torch.float64), 1)
    pseudo = torch.from_numpy(ball(shape, (c - 1, c, c + 1), size / 4).astype(np.int64))[None]
    gen = torch.Generator().manual_seed(seed)
    gstate = gen.get_state()

    def objective():
        gen.set_state(gstate)
        probs = forward(model, x, stochastic=True, generator=gen)
        bd = total_objective(
            supervised_loss(probs[:1], y),
            consistency_loss(probs[1:], teacher_pm),
            sam_consistency_loss(probs[1:], pseudo),
            t=100, t_max=300, sam_skipped=False,
        )
        return bd.total

    model.zero_grad()
    objective().backward()
    params = [p for p in model.parameters()]
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(sizes.sum(), size=n_coords, replace=False)
    pairs = []
    with torch.no_grad():
        for f in flat:
            i = int(np.searchsorted(np.cumsum(sizes), f, side="right"))
            j = int(f - (np.cumsum(sizes)[i - 1] if i else 0))
            p = params[i].view(-1)
            orig = p[j].item()
            p[j] = orig + h
            up = objective().item()
            p[j] = orig - h
            down = objective().item()
            p[j] = orig
            pairs.append((params[i].grad.view(-1)[j].item(), (up - down) / (2 * h)))
    return pairs
