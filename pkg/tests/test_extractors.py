import numpy as np
import pytest
import torch

from larnet.extractors import (ActionClassifier, ClassifierConfig, FeatureExtractorHandle, load_extractor,
                               random_perceptual_net, save_extractor, train_classifier)


def test_handle_shapes_and_determinism():
    torch.manual_seed(0)
    handle = FeatureExtractorHandle(ActionClassifier(ClassifierConfig(num_classes=3, resolution=32, clip_len=8,
                                                                      width=8)))
    frames = np.random.default_rng(0).uniform(-1, 1, (5, 32, 32, 3))
    clips = np.random.default_rng(1).uniform(-1, 1, (4, 8, 32, 32, 3))
    f = handle.frame_features(frames)
    c = handle.clip_features(clips)
    assert f.shape == (5, handle.frame_dim) and c.shape == (4, handle.clip_dim)
    assert np.array_equal(f, handle.frame_features(frames))
    assert handle.predict(clips).shape == (4,)
    with pytest.raises(ValueError, match="32x32"):
        handle.frame_features(np.zeros((2, 16, 16, 3)))
    assert all(not p.requires_grad for p in handle.model.parameters())


def test_random_perceptual_net_is_frozen_and_leaves_global_rng_alone():
    state = torch.random.get_rng_state()
    a, b = random_perceptual_net(3), random_perceptual_net(3)
    assert torch.equal(torch.random.get_rng_state(), state)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert all(not p.requires_grad for p in a.parameters())


def test_classifier_learns_synthetic_motions_and_round_trips(tmp_path, tiny_dataset):
    cfg = ClassifierConfig(num_classes=2, resolution=32, clip_len=8, width=8)
    model, acc = train_classifier(tiny_dataset, cfg, steps=60, batch_size=8, seed=0, log_every=1000)
    assert 0.0 <= acc <= 1.0
    path = str(tmp_path / "ext.pt")
    save_extractor(model, path)
    handle = load_extractor(path)
    clips = np.random.default_rng(0).uniform(-1, 1, (2, 8, 32, 32, 3))
    assert np.array_equal(handle.clip_features(clips), FeatureExtractorHandle(model).clip_features(clips))
    torch.save({"format": "other"}, str(tmp_path / "bad.pt"))
    with pytest.raises(ValueError):
        load_extractor(str(tmp_path / "bad.pt"))
