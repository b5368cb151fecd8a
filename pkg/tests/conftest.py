import warnings

import pytest

from patchbench.detector import train_toy_detector
from patchbench.synthetic import SyntheticSceneSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_bundle():
    """A small trained detector plus its data, shared across the session.

    Deliberately undersized (200 scenes, 14 epochs) so the whole suite stays
    fast; tests that need the full-quality bar live in the acceptance module.
    """
    spec = SyntheticSceneSpec()
    train = generate_synthetic_dataset(spec, 200, seed=101)
    test = generate_synthetic_dataset(spec, 60, seed=102)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        det = train_toy_detector(train, seed=0, epochs=14, lr=2e-3,
                                 val_scenes=test, min_clean_ap=0.0)
    return {"detector": det, "train": train, "test": test, "spec": spec}
