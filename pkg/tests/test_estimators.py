import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from latentreg.descriptor import decode, init_model
from latentreg.estimators import LatentAutoencoder, MultiviewRegistration
from latentreg.geom3d import RigidMotion, sample_uniform_rotation


@pytest.fixture(scope="module")
def model():
    return init_model(latent_dim=8, k_out=32, encoder_widths=(8, 12), decoder_widths=(16, 32), seed=2)


def test_params_round_trip_and_clone():
    ae = LatentAutoencoder(latent_dim=16, epochs=2)
    assert ae.get_params()["latent_dim"] == 16
    assert clone(ae).get_params() == ae.get_params()
    reg = MultiviewRegistration(v=0.8, top_m=2)
    c = clone(reg).set_params(o=0.1)
    assert c.o == 0.1 and c.v == 0.8 and reg.o == 0.0


def test_autoencoder_transform_shapes(model):
    ae = LatentAutoencoder.from_model(model)
    rng = np.random.default_rng(0)
    clouds = [rng.standard_normal((20, 3)), rng.standard_normal((35, 3))]
    z = ae.transform(clouds)
    assert z.shape == (2, 8)
    assert ae.transform(clouds[0]).shape == (1, 8)
    assert ae.inverse_transform(z).shape == (2, 32, 3)
    assert ae.score(clouds[:1]) <= 0
    with pytest.raises(NotFittedError):
        LatentAutoencoder().transform(clouds)


def test_autoencoder_tiny_fit():
    ae = LatentAutoencoder(latent_dim=4, k_out=16, n_points=64, encoder_widths=(4,), decoder_widths=(8,),
                           epochs=1, batch_size=4, samples_per_epoch=8).fit()
    assert len(ae.history_) == 1 and np.isfinite(ae.validation_chamfer_)


def test_registration_fit_transform_inverts_fitted_poses(model):
    rng = np.random.default_rng(3)
    x = decode(model, rng.standard_normal(8))
    poses = [RigidMotion(r) for r in sample_uniform_rotation(rng, 2)]
    views = [p.apply(x) for p in poses]
    reg = MultiviewRegistration(model=model, grid_size=300, grid_neighbors=8, top_m=2,
                                patience_stop=20, max_steps=80, max_rounds=3)
    aligned = reg.fit_transform(views)
    assert len(aligned) == 2 and aligned[0].shape == x.shape
    assert reg.template_.shape == (32, 3) and reg.z_.shape == (8,)
    for p, a, v in zip(reg.poses_, aligned, views):
        assert np.allclose(p.apply(a), v, atol=1e-10)
    assert reg.report_.rounds and np.all(np.isfinite(reg.report_.losses))
    with pytest.raises(NotFittedError):
        MultiviewRegistration(model=model).transform(views)
