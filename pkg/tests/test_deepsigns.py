import numpy as np
import pytest
import torch

from wbmark.core import BitString, ber, derive_rng
from wbmark.errors import InputError, SelectionError
from wbmark.gmm import fit_gmm
from wbmark.models import TrainConfig, checkpoint_to_model, to_tensors
from wbmark.schemes import deepsigns, uchida


@pytest.fixture(scope="module")
def keyed(synth_base, synth_train):
    model = checkpoint_to_model(synth_base)
    keys, gmm = deepsigns.generate_keys(model, 256, seed=31, train=synth_train,
                                        n_classes=2, fraction=0.05)
    return model, keys, gmm


class TestGmmOverActivations:
    def test_majority_agreement_with_labels(self, keyed, synth_train):
        # on a well-separated task the mixture recovers the class structure
        model, keys, gmm = keyed
        images, labels = to_tensors(synth_train)
        acts = deepsigns.collect_activations(model, keys.layer_index, images)
        assignments = gmm.predict(acts)
        agree = 0
        for comp in range(gmm.n_components):
            mask = assignments == comp
            if mask.any():
                counts = np.bincount(labels.numpy()[mask], minlength=10)
                agree += counts.max()
        assert agree / len(synth_train) > 0.8

    def test_component_count_validated(self, synth_base, synth_train):
        model = checkpoint_to_model(synth_base)
        images, _ = to_tensors(synth_train)
        with pytest.raises(InputError):
            deepsigns.fit_activation_gmm(model, 1, images, 0, seed=0)


class TestTriggerSelection:
    def test_membership_conditions_hold(self, keyed, synth_train):
        model, keys, gmm = keyed
        images, labels = to_tensors(synth_train)
        acts = deepsigns.collect_activations(model, keys.layer_index, images)
        assignments = gmm.predict(acts)
        for idx in keys.trigger_indices:
            assert assignments[idx] in keys.classes
            assert labels[idx].item() in keys.classes

    def test_fraction_respected(self, keyed, synth_train):
        _, keys, _ = keyed
        target = int(0.05 * len(synth_train))
        assert 0 < len(keys.trigger_indices) <= int(1.3 * target) + len(keys.classes)

    def test_empty_t_rejected(self, keyed, synth_train):
        model, keys, gmm = keyed
        images, labels = to_tensors(synth_train)
        acts = deepsigns.collect_activations(model, keys.layer_index, images)
        with pytest.raises(SelectionError):
            deepsigns.select_trigger_set(gmm, acts, labels.numpy(), (), 0.01,
                                         np.random.default_rng(0))

    def test_all_components_maximal_case(self, keyed, synth_train):
        model, keys, gmm = keyed
        images, labels = to_tensors(synth_train)
        acts = deepsigns.collect_activations(model, keys.layer_index, images)
        sel = deepsigns.select_trigger_set(gmm, acts, labels.numpy(),
                                           tuple(range(10)), 1.0,
                                           np.random.default_rng(0))
        assignments = gmm.predict(acts)
        eligible = np.isin(assignments, range(10)) & np.isin(labels.numpy(), range(10))
        assert len(sel.indices) <= int(eligible.sum())

    def test_out_of_range_component(self, keyed, synth_train):
        model, keys, gmm = keyed
        images, labels = to_tensors(synth_train)
        acts = deepsigns.collect_activations(model, keys.layer_index, images)
        with pytest.raises(SelectionError):
            deepsigns.select_trigger_set(gmm, acts, labels.numpy(), (99,), 0.01,
                                         np.random.default_rng(0))


class TestFeatureSets:
    def test_partition_by_label(self, keyed, synth_train):
        model, keys, _ = keyed
        sets = deepsigns.extract_feature_sets(model, keys, synth_train)
        total = sum(len(v) for v in sets.values())
        assert total == len(keys.trigger_indices)
        assert set(sets) == set(keys.classes)

    def test_matches_forward_oracle(self, keyed, synth_train):
        model, keys, _ = keyed
        sets = deepsigns.extract_feature_sets(model, keys, synth_train)
        images, _ = to_tensors(synth_train)
        c = keys.classes[0]
        member = keys.trigger_indices[keys.trigger_labels == c][0]
        with torch.no_grad():
            _, pre = model.forward_with_preacts(images[member:member + 1])
        assert torch.allclose(sets[c][0], pre[keys.layer_index][0], atol=1e-6)


class TestLosses:
    def test_zero_at_satisfied_configuration(self):
        m, n = 8, 6
        rng = np.random.default_rng(0)
        a = rng.standard_normal((m, n)).astype(np.float32)
        bits = rng.integers(0, 2, n)
        # theta aligned with payload: theta @ A strongly matches bits
        theta_vec = np.linalg.lstsq(a.T.astype(np.float64),
                                    (2.0 * bits - 1.0) * 30.0, rcond=None)[0]
        theta = {0: torch.tensor(theta_vec, dtype=torch.float32)}
        acts = {0: torch.tensor(theta_vec, dtype=torch.float32).repeat(3, 1)}
        payload_rows = {0: torch.tensor(bits, dtype=torch.float32)}
        e_wat, e_sep = deepsigns.losses(theta, torch.tensor(a), payload_rows,
                                        acts, torch.zeros((0, m)))
        assert float(e_wat) < 1e-3
        assert float(e_sep) == 0.0

    def test_e_sep_zero_when_all_selected(self):
        theta = {0: torch.zeros(4), 1: torch.ones(4)}
        payload_rows = {0: torch.zeros(2), 1: torch.zeros(2)}
        acts = {0: torch.zeros((2, 4)), 1: torch.ones((2, 4))}
        _, e_sep = deepsigns.losses(theta, torch.zeros((4, 2)), payload_rows,
                                    acts, torch.zeros((0, 4)))
        assert float(e_sep) == 0.0

    def test_matches_independent_summation_oracle(self):
        rng = np.random.default_rng(7)
        m, n = 5, 4
        a = rng.standard_normal((m, n))
        theta_np = {0: rng.standard_normal(m), 2: rng.standard_normal(m)}
        bits = {0: rng.integers(0, 2, n), 2: rng.integers(0, 2, n)}
        acts_np = {0: rng.standard_normal((6, m)), 2: rng.standard_normal((3, m))}
        nonsel = rng.standard_normal((2, m))

        # independent numpy computation
        e_wat_expected = 0.0
        for c in (0, 2):
            z = theta_np[c] @ a
            p = 1.0 / (1.0 + np.exp(-z))
            p = np.clip(p, 1e-12, 1 - 1e-12)
            b = bits[c]
            e_wat_expected += float(-(b * np.log(p) + (1 - b) * np.log(1 - p)).sum())
            e_wat_expected += float(((theta_np[c] - acts_np[c].mean(0)) ** 2).sum())
        e_sep_expected = sum(float(np.linalg.norm(theta_np[c] - nonsel[j]))
                             for c in (0, 2) for j in range(2))

        theta = {c: torch.tensor(v) for c, v in theta_np.items()}
        payload_rows = {c: torch.tensor(v, dtype=torch.float64) for c, v in bits.items()}
        acts = {c: torch.tensor(v) for c, v in acts_np.items()}
        e_wat, e_sep = deepsigns.losses(theta, torch.tensor(a), payload_rows,
                                        acts, torch.tensor(nonsel))
        assert float(e_wat) == pytest.approx(e_wat_expected, rel=1e-9)
        assert float(e_sep) == pytest.approx(e_sep_expected, rel=1e-9)


class TestEmbedExtract:
    @pytest.fixture(scope="class")
    def embedded(self, synth_base, synth_train, synth_test, keyed):
        _, keys, gmm = keyed
        payload = BitString.random(256, derive_rng(17, "payload"))
        wat, trained, report = deepsigns.embed(
            synth_base, payload, keys, synth_train, synth_test,
            cfg=TrainConfig(epochs=15, seed=8), seed=8, gmm=gmm)
        return wat, trained, payload, report

    def test_round_trip_zero_ber(self, embedded, synth_train):
        wat, keys, payload, report = embedded
        assert report["ber"] == 0.0
        assert deepsigns.extract(wat, keys, synth_train) == payload

    def test_payload_recorded_in_keys(self, embedded):
        _, keys, payload, _ = embedded
        assert keys.payloads is not None
        assert np.array_equal(keys.payloads.reshape(-1), payload.bits)

    def test_baseline_reads_as_noise(self, embedded, synth_base, synth_train):
        _, keys, payload, _ = embedded
        rate = ber(deepsigns.extract(synth_base, keys, synth_train), payload)
        assert 0.35 <= rate <= 0.65

    def test_wrong_matrix_reads_as_noise(self, embedded, synth_train):
        wat, keys, payload, _ = embedded
        from dataclasses import replace
        wrong = replace(keys, matrix=np.random.default_rng(99).standard_normal(
            keys.matrix.shape).astype(np.float32))
        rate = ber(deepsigns.extract(wat, wrong, synth_train), payload)
        assert 0.35 <= rate <= 0.65

    def test_extraction_deterministic(self, embedded, synth_train):
        wat, keys, _, _ = embedded
        a = deepsigns.extract(wat, keys, synth_train)
        b = deepsigns.extract(wat, keys, synth_train)
        assert a == b

    def test_lambda1_zero_embeds_nothing(self, synth_base, synth_train, synth_test, keyed):
        from dataclasses import replace
        _, keys, gmm = keyed
        free = replace(keys, lambda1=0.0, lambda2=0.0)
        payload = BitString.random(256, derive_rng(18, "payload"))
        _, trained, report = deepsigns.embed(
            synth_base, payload, free, synth_train, synth_test,
            cfg=TrainConfig(epochs=3, seed=9), seed=9, gmm=gmm)
        assert 0.35 <= report["ber"] <= 0.65

    def test_projection_identity_with_static_path(self, embedded, synth_train):
        # the per-class projection of a mean vector is the shared
        # matrix-sigmoid path used by the static scheme
        wat, keys, _, _ = embedded
        model = checkpoint_to_model(wat)
        sets = deepsigns.extract_feature_sets(model, keys, synth_train)
        c = keys.classes[0]
        mean = sets[c].mean(dim=0).numpy().astype(np.float64)
        from wbmark.core import hard_threshold
        direct = hard_threshold(uchida.project(mean, keys.matrix))
        via_ds = deepsigns.extract(model, keys, synth_train)
        assert via_ds.bits[:keys.matrix.shape[1]].tolist() == direct.bits.tolist()

    def test_payload_length_checked(self, keyed, synth_base, synth_train, synth_test):
        _, keys, gmm = keyed
        with pytest.raises(InputError):
            deepsigns.embed(synth_base, BitString.random(100, derive_rng(0)),
                            keys, synth_train, synth_test, gmm=gmm)

    def test_bundle_round_trip(self, embedded, synth_train, tmp_path):
        wat, keys, payload, _ = embedded
        from wbmark import schemes
        schemes.save_keys(keys, tmp_path / "k.json")
        loaded = schemes.load_keys(tmp_path / "k.json")
        assert deepsigns.extract(wat, loaded, synth_train) == payload
        assert np.array_equal(loaded.trigger_indices, keys.trigger_indices)
