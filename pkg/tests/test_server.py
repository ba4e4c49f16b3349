"""Generation integrity, classifier training, and baseline behavior."""

import numpy as np
import pytest

from feddeo import datagen as dg
from feddeo.client import init_descriptions, package_upload, train_descriptions
from feddeo.diffusion import (
    IntegrityError,
    NoisePredictor,
    freeze,
    make_schedule,
    pretrain_dm,
)
from feddeo.server import (
    Classifier,
    ServerError,
    SyntheticDataset,
    export_synthetic_csv,
    generate_prompts_only,
    generate_synthetic,
    load_synthetic_csv,
    train_centralized,
    train_classifier,
    train_fedavg,
)


@pytest.fixture(scope="module")
def setup():
    world = dg.make_world(n_categories=3, seed=11)
    clients = dg.partition_feature_skew(world, 2, train_per_class=40, test_per_class=20, seed=11)
    model = NoisePredictor(data_dim=2, n_classes=3, hidden=24, depth=2, seed=11)
    sched = make_schedule(T=30)
    allx = np.vstack([c.train_x for c in clients])
    ally = np.concatenate([c.train_y for c in clients])
    pretrain_dm(model, sched, (allx, ally), epochs=5, learning_rate=3e-3, seed=11)
    freeze(model)
    payloads = []
    for c in clients:
        state = init_descriptions(c, model)
        train_descriptions(state, model, sched, epochs=1, seed=11)
        payloads.append(package_upload(state, model_digest=model.frozen_digest))
    return world, clients, model, sched, payloads


def test_generate_counts_labels_and_provenance(setup):
    _, _, model, sched, payloads = setup
    data = generate_synthetic(model, sched, payloads, samples_per_pair=4, seed=1)
    assert len(data) == 2 * 3 * 4
    assert set(data.y.tolist()) == {0, 1, 2}
    assert set(data.source_client.tolist()) == {0, 1}
    for client in (0, 1):
        for cat in range(3):
            mask = (data.source_client == client) & (data.y == cat)
            assert mask.sum() == 4
            assert sorted(data.replicate[mask].tolist()) == [0, 1, 2, 3]
    assert data.model_digest == model.frozen_digest


def test_generate_is_deterministic(setup):
    _, _, model, sched, payloads = setup
    a = generate_synthetic(model, sched, payloads, samples_per_pair=3, seed=5)
    b = generate_synthetic(model, sched, payloads, samples_per_pair=3, seed=5)
    assert np.array_equal(a.x, b.x)
    c = generate_synthetic(model, sched, payloads, samples_per_pair=3, seed=6)
    assert not np.array_equal(a.x, c.x)


def test_generate_rejects_digest_mismatch(setup):
    _, _, model, sched, payloads = setup
    bad = [type(p)(client_id=p.client_id, entries=p.entries, model_digest="stale") for p in payloads]
    with pytest.raises(IntegrityError) as err:
        generate_synthetic(model, sched, bad, samples_per_pair=2, seed=1)
    assert "stale" in str(err.value)
    with pytest.raises(IntegrityError):
        generate_synthetic(model, sched, [payloads[0], bad[1]], samples_per_pair=2, seed=1)


def test_generate_validates_inputs(setup):
    _, _, model, sched, payloads = setup
    with pytest.raises(ServerError):
        generate_synthetic(model, sched, [], samples_per_pair=2, seed=1)
    with pytest.raises(ServerError):
        generate_synthetic(model, sched, payloads, samples_per_pair=0, seed=1)


def test_prompts_only_ignores_clients(setup):
    _, _, model, sched, _ = setup
    data = generate_prompts_only(model, sched, samples_per_class=5, seed=2)
    assert len(data) == 3 * 5
    assert np.all(data.source_client == -1)
    assert set(data.y.tolist()) == {0, 1, 2}


def test_synthetic_csv_roundtrip(tmp_path, setup):
    _, _, model, sched, payloads = setup
    data = generate_synthetic(model, sched, payloads, samples_per_pair=3, seed=7)
    path = tmp_path / "synthetic.csv"
    export_synthetic_csv(path, data)
    back = load_synthetic_csv(path, model_digest=data.model_digest)
    assert np.array_equal(back.x, data.x)
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.source_client, data.source_client)
    assert np.array_equal(back.replicate, data.replicate)


def test_classifier_learns_separable_blobs():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(size=(100, 2)) * 0.2 + [0, 0],
                   rng.normal(size=(100, 2)) * 0.2 + [3, 0],
                   rng.normal(size=(100, 2)) * 0.2 + [0, 3]])
    y = np.repeat([0, 1, 2], 100)
    clf, losses = train_classifier(X, y, 3, epochs=120, seed=3)
    acc = float(np.mean(clf.predict(X) == y))
    assert acc > 0.98
    assert losses[-1] < losses[0]


def test_classifier_convergence_stop():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(size=(50, 2)) * 0.1, rng.normal(size=(50, 2)) * 0.1 + [5, 5]])
    y = np.repeat([0, 1], 50)
    _, losses = train_classifier(X, y, 2, epochs=500, convergence_tol=1e-4,
                                 convergence_patience=10, seed=4)
    assert len(losses) < 500  # trivially separable: stops well before the cap


def test_classifier_tie_breaks_to_lowest_index():
    clf = Classifier(2, 3, hidden=4, depth=1, seed=0)
    for p in clf.trainable():
        p.data[:] = 0.0  # all logits identical
    assert np.all(clf.predict(np.ones((5, 2))) == 0)


def test_classifier_validation():
    with pytest.raises(ServerError):
        train_classifier(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ServerError):
        train_classifier(np.zeros((4, 2)), np.array([0, 1, 2, 0]), 2)


def test_fedavg_symmetric_clients_equals_single_model():
    # identical datasets + shared streams: the average must equal each local model
    world = dg.make_world(n_categories=3, seed=13)
    base = dg.partition_feature_skew(world, 1, train_per_class=30, test_per_class=10, seed=13)[0]
    twin = dg.ClientDataset(client_id=1, x=base.x.copy(), y=base.y.copy(),
                            domain=base.domain.copy(), is_train=base.is_train.copy(),
                            assignment=base.assignment)
    avg_clf, _ = train_fedavg([base, twin], 3, rounds=1, local_epochs=1, seed=13)

    solo_clf, _ = train_fedavg([base], 3, rounds=1, local_epochs=1, seed=13)
    assert np.array_equal(avg_clf.get_flat_params(), solo_clf.get_flat_params())


def test_fedavg_weighted_average_moves_toward_larger_client():
    world = dg.make_world(n_categories=2, seed=14)
    clients = dg.partition_feature_skew(world, 2, train_per_class=40, test_per_class=10, seed=14)
    big = clients[0]
    small = dg.ClientDataset(client_id=1, x=clients[1].x[:20], y=clients[1].y[:20],
                             domain=clients[1].domain[:20], is_train=clients[1].is_train[:20],
                             assignment=clients[1].assignment)
    clf, history = train_fedavg([big, small], 2, rounds=2, seed=14)
    assert len(history) == 2
    assert np.isfinite(clf.get_flat_params()).all()


def test_centralized_trains_on_union():
    world = dg.make_world(n_categories=3, seed=15)
    clients = dg.partition_feature_skew(world, 3, train_per_class=60, test_per_class=30, seed=15)
    clf, _ = train_centralized(clients, 3, epochs=150, seed=15)
    test_x = np.vstack([c.test_x for c in clients])
    test_y = np.concatenate([c.test_y for c in clients])
    acc = float(np.mean(clf.predict(test_x) == test_y))
    assert acc > 0.9
