"""Description training isolation and the upload wire format."""

import numpy as np
import pytest

from feddeo import datagen as dg
from feddeo.client import (
    ClientError,
    ClientState,
    UploadFormatError,
    init_descriptions,
    package_upload,
    parse_upload,
    train_descriptions,
)
from feddeo.diffusion import (
    FrozenModelError,
    NoisePredictor,
    freeze,
    make_schedule,
    model_digest,
    pretrain_dm,
)


def _small_setup(seed=0, n_categories=4, pretrained=False):
    world = dg.make_world(n_categories=n_categories, seed=seed)
    clients = dg.partition_feature_skew(world, 2, train_per_class=40, test_per_class=10, seed=seed)
    model = NoisePredictor(data_dim=2, n_classes=n_categories, hidden=16, depth=2, seed=seed)
    sched = make_schedule(T=40)
    if pretrained:
        # a short real pretrain: the zero-init output layer passes no gradient
        # to the condition until the model has learned something
        allx = np.vstack([c.train_x for c in clients])
        ally = np.concatenate([c.train_y for c in clients])
        pretrain_dm(model, sched, (allx, ally), epochs=3, learning_rate=3e-3, seed=seed)
    return world, clients, model, sched


def test_init_seeds_descriptions_with_self_caption():
    _, clients, model, _ = _small_setup()
    state = init_descriptions(clients[0], model)
    assert sorted(state.descriptions) == clients[0].categories
    anchor = clients[0].train_x.mean(axis=0)
    for cat, desc in state.descriptions.items():
        assert desc.condition.kind == "description"
        expected = model.class_embeddings.data[cat] + anchor @ model.context_projection
        assert np.allclose(desc.condition.values, expected)
        assert desc.epochs_trained == 0
    # the seed vector is independent of the model table
    state.descriptions[0].condition.values[0] += 99.0
    assert model.class_embeddings.data[0, 0] != state.descriptions[0].condition.values[0]


def test_training_requires_frozen_model():
    _, clients, model, sched = _small_setup()
    state = init_descriptions(clients[0], model)
    with pytest.raises(FrozenModelError):
        train_descriptions(state, model, sched, epochs=1, seed=0)


def test_training_moves_descriptions_not_the_model():
    _, clients, model, sched = _small_setup(pretrained=True)
    freeze(model)
    state = init_descriptions(clients[0], model)
    before = {c: d.condition.values.copy() for c, d in state.descriptions.items()}
    losses = train_descriptions(state, model, sched, epochs=2, seed=1)
    assert len(losses) == 2 and all(np.isfinite(losses))
    assert model_digest(model) == model.frozen_digest  # model untouched
    for cat, desc in state.descriptions.items():
        assert not np.array_equal(desc.condition.values, before[cat])
        assert desc.epochs_trained == 2


def test_category_training_is_isolated():
    # training with category 3 removed (same starting descriptions) leaves the
    # other descriptions bit-identical: no shared state leaks across categories
    world, clients, model, sched = _small_setup(pretrained=True)
    freeze(model)
    full = init_descriptions(clients[0], model)
    train_descriptions(full, model, sched, epochs=2, seed=7)

    ds = clients[0]
    keep = ds.y != 3
    reduced = dg.ClientDataset(
        client_id=ds.client_id, x=ds.x[keep], y=ds.y[keep], domain=ds.domain[keep],
        is_train=ds.is_train[keep],
        assignment={c: doms for c, doms in ds.assignment.items() if c != 3})
    init_again = init_descriptions(clients[0], model)
    partial = ClientState(client_id=ds.client_id, dataset=reduced,
                          descriptions={c: d for c, d in init_again.descriptions.items()
                                        if c != 3})
    train_descriptions(partial, model, sched, epochs=2, seed=7)
    for cat in partial.descriptions:
        assert np.array_equal(partial.descriptions[cat].condition.values,
                              full.descriptions[cat].condition.values)


def test_training_deterministic_given_seed():
    _, clients, model, sched = _small_setup(pretrained=True)
    freeze(model)
    a = init_descriptions(clients[0], model)
    b = init_descriptions(clients[0], model)
    train_descriptions(a, model, sched, epochs=2, seed=5)
    train_descriptions(b, model, sched, epochs=2, seed=5)
    for cat in a.descriptions:
        assert np.array_equal(a.descriptions[cat].condition.values,
                              b.descriptions[cat].condition.values)


def test_missing_category_samples_is_an_error():
    _, clients, model, sched = _small_setup(pretrained=True)
    freeze(model)
    ds = clients[0]
    # claim category 2 but hold no rows for it
    butchered = dg.ClientDataset(
        client_id=ds.client_id, x=ds.x[ds.y != 2], y=ds.y[ds.y != 2],
        domain=ds.domain[ds.y != 2], is_train=ds.is_train[ds.y != 2],
        assignment=ds.assignment)
    state = init_descriptions(butchered, model)
    with pytest.raises(ClientError) as err:
        train_descriptions(state, model, sched, epochs=1, seed=0)
    assert "category 2" in str(err.value)


def test_payload_size_formula():
    # header 16 bytes + per entry 8 + 4 * cond_dim: 10 entries of dim 16 -> 736
    world = dg.make_world(n_categories=10, seed=3)
    clients = dg.partition_feature_skew(world, 4, train_per_class=5, test_per_class=5, seed=3)
    model = NoisePredictor(data_dim=2, n_classes=10, cond_dim=16, hidden=8, depth=1, seed=3)
    state = init_descriptions(clients[3], model)
    payload = package_upload(state, model_digest="abc")
    blob = payload.to_bytes()
    assert len(blob) == 16 + 10 * (8 + 64) == 736
    assert payload.parameter_count == 160
    assert payload.value_bytes == 640
    assert payload.client_id == 3 and payload.model_digest == "abc"


def test_payload_roundtrip_is_bit_exact():
    world = dg.make_world(n_categories=4, seed=4)
    clients = dg.partition_feature_skew(world, 1, train_per_class=5, test_per_class=5, seed=4)
    model = NoisePredictor(data_dim=2, n_classes=4, hidden=8, depth=1, seed=4)
    state = init_descriptions(clients[0], model)
    payload = package_upload(state, model_digest="d1")
    blob = payload.to_bytes()
    back = parse_upload(blob, model_digest="d1")
    assert back.client_id == payload.client_id
    assert len(back.entries) == len(payload.entries)
    for (c1, v1), (c2, v2) in zip(payload.entries, back.entries):
        assert c1 == c2
        assert np.array_equal(v1, v2)
    assert back.to_bytes() == blob


def test_parse_rejects_malformed_payloads():
    world = dg.make_world(n_categories=3, seed=5)
    clients = dg.partition_feature_skew(world, 1, train_per_class=5, test_per_class=5, seed=5)
    model = NoisePredictor(data_dim=2, n_classes=3, hidden=8, depth=1, seed=5)
    blob = package_upload(init_descriptions(clients[0], model)).to_bytes()

    with pytest.raises(UploadFormatError) as err:
        parse_upload(b"XXXX" + blob[4:])
    assert err.value.reason == "magic"

    bad_version = bytearray(blob)
    bad_version[4] = 99
    with pytest.raises(UploadFormatError) as err:
        parse_upload(bytes(bad_version))
    assert err.value.reason == "version"

    with pytest.raises(UploadFormatError) as err:
        parse_upload(blob[:-10])
    assert err.value.reason == "truncated"

    with pytest.raises(UploadFormatError) as err:
        parse_upload(blob + b"\x00\x00")
    assert err.value.reason == "truncated"
