"""Checks that need the packaged pretrained backbone (slow: full inversions)."""

import numpy as np
import pytest
import torch

from toyhoi import scenes
from toyhoi.backbone import Vocabulary, encode_prompt
from toyhoi.diffusion import sample
from toyhoi.editing import edit_many
from toyhoi.iebench import mock
from toyhoi.iebench.metrics import HOITriplet, hoi_match, identity_consistency
from toyhoi.iebench.mock import MockHOIDetector
from toyhoi.inversion import TrainConfig, invert, reconstruction_loss

pytestmark = pytest.mark.slow

RECON_RATIO_MAX = 0.25
# pixel bound fixed from the first verified run on the committed checkpoint (max 0.371 over seeds 0..2)
IDENTITY_EDIT_MSE_MAX = 0.4


def test_base_prior_draws_the_prompted_interaction(pretrained):
    """Plain-text prompts already produce layouts the mock detector reads (the zero-shot prior)."""
    vocab = Vocabulary()
    hits, total = 0, 0
    for obj, verb in [("horse", "ride"), ("dog", "walk"), ("ball", "kick"), ("chair", "lie_on"), ("cake", "hold"),
                     ("board", "carry")]:
        spec = scenes.SceneSpec("man", obj, "grass", verb, 8)
        cond = encode_prompt(vocab.tokenize(scenes.caption(spec)), pretrained.text)
        with torch.no_grad():
            z0 = sample(pretrained, cond[None].expand(4, -1, -1), seed=range(4),
                        clip_range=pretrained.cfg.latent_scale)
        for img in pretrained.cfg.decode_latent(z0):
            hits += hoi_match(MockHOIDetector()(img, scenes.scene_meta(spec)), HOITriplet(*spec.triplet))
            total += 1
    assert hits / total >= 0.5, f"{hits}/{total}"


def test_inversion_reduces_reconstruction_loss(pretrained, fixture_scene, fixture_labels, full_run):
    img, masks = fixture_scene
    start = invert(img, masks, fixture_labels, pretrained, TrainConfig(stage1_steps=0, stage2_steps=0))
    before = reconstruction_loss(pretrained, start, img)
    after = reconstruction_loss(pretrained, full_run["art"], img)
    assert after < RECON_RATIO_MAX * before, (before, after)


def test_identity_edit_reproduces_source(pretrained, fixture_scene, fixture_spec, full_run):
    img, _ = fixture_scene
    edits = edit_many(pretrained, full_run["art"], fixture_spec.verb, range(3))
    errors = [float(np.mean((e - img) ** 2)) for e in edits]
    assert max(errors) < IDENTITY_EDIT_MSE_MAX, errors


def test_identity_edit_keeps_the_source_hoi(pretrained, fixture_scene, fixture_spec, fixture_labels, full_run):
    """Editing to the source verb gives back the source triplet and identities; untrained tokens do not."""
    img, masks = fixture_scene
    meta = scenes.scene_meta(fixture_spec)
    backends = mock.mock_backends()
    untrained = invert(img, masks, None, pretrained, TrainConfig(stage1_steps=0, stage2_steps=0))

    def scores(art):
        edits = edit_many(pretrained, art, fixture_spec.verb, range(6))
        hits = [hoi_match(MockHOIDetector()(e, meta), HOITriplet(*fixture_spec.triplet)) for e in edits]
        ics = [identity_consistency(img, e, fixture_labels["subject"], fixture_labels["object"], backends, meta)
               for e in edits]
        return float(np.mean(hits)), float(np.mean(ics))

    e, ic = scores(full_run["art"])
    e0, ic0 = scores(untrained)
    assert e >= 0.5 and ic >= 0.8, (e, ic)
    assert e > e0 and ic > ic0, ((e, ic), (e0, ic0))
