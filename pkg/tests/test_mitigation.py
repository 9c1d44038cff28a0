"""Contrastive classifier and filtering layer."""

import numpy as np
import pytest

from rulelab import mitigation as mt, scenegen as sg, vision as vz


def reference_nt_xent(z, pos_index, tau):
    """Straightforward loop implementation used as an oracle."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for i in range(n):
        sims = np.array([zn[i] @ zn[k] for k in range(n) if k != i])
        pos = zn[i] @ zn[pos_index[i]]
        total += -np.log(np.exp(pos / tau) / np.exp(sims / tau).sum())
    return total / n


class TestNtXent:
    def test_two_embeddings_mutual_positives(self):
        # with n=2 the denominator contains only the positive, so loss is 0
        z = np.array([[1.0, 0.0], [0.3, 0.9]])
        assert mt.nt_xent(z, np.array([1, 0])) == pytest.approx(0.0,
                                                                abs=1e-12)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((8, 5))
        pos = np.array([1, 0, 3, 2, 5, 4, 7, 6])
        for tau in (0.2, 0.5, 1.0):
            assert mt.nt_xent(z, pos, tau) == pytest.approx(
                reference_nt_xent(z, pos, tau), abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((6, 4))
        pos = np.array([1, 0, 3, 2, 5, 4])
        scales = rng.uniform(0.1, 10.0, size=(6, 1))
        assert mt.nt_xent(z * scales, pos) == pytest.approx(
            mt.nt_xent(z, pos), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((6, 4))
        pos = np.array([1, 0, 3, 2, 5, 4])
        tau = 0.5
        _, g = mt._nt_xent_value_grad(z, pos, tau)
        h = 1e-6
        for i in range(6):
            for j in range(4):
                z[i, j] += h
                lp = mt.nt_xent(z, pos, tau)
                z[i, j] -= 2 * h
                lm = mt.nt_xent(z, pos, tau)
                z[i, j] += h
                fd = (lp - lm) / (2 * h)
                assert abs(fd - g[i, j]) <= 1e-4 * max(abs(fd), 1e-8)

    def test_rejects_degenerate_input(self):
        with pytest.raises(mt.MitigationError):
            mt.nt_xent(np.ones((1, 3)), np.array([0]))
        with pytest.raises(mt.MitigationError):
            mt.nt_xent(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1, 0]))


class TestCombinedLoss:
    def make_params(self, f, h, seed):
        rng = np.random.default_rng(seed)
        return (rng.standard_normal((f, h)), rng.standard_normal(h),
                rng.standard_normal((h, 3)), rng.standard_normal(3))

    def test_additivity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((10, 5))
        y = rng.integers(0, 3, 10)
        pos = np.array([1, 0, 3, 2, 5, 4, 7, 6, 9, 8])
        params = self.make_params(5, 6, seed=4)
        ce, _ = mt.loss_and_grads(params, x, y, pos, 0.0, 0.5)
        tot, _ = mt.loss_and_grads(params, x, y, pos, 2.0, 0.5)
        H = np.tanh(x @ params[0] + params[1])
        assert tot == pytest.approx(ce + 2.0 * mt.nt_xent(H, pos, 0.5),
                                    abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 4))
        y = rng.integers(0, 3, 8)
        pos = np.array([1, 0, 3, 2, 5, 4, 7, 6])
        params = [p.copy() for p in self.make_params(4, 5, seed=6)]
        _, grads = mt.loss_and_grads(tuple(params), x, y, pos, 1.5, 0.5)
        h = 1e-6
        for pi, P in enumerate(params):
            it = np.nditer(P, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                P[idx] += h
                lp, _ = mt.loss_and_grads(tuple(params), x, y, pos, 1.5, 0.5)
                P[idx] -= 2 * h
                lm, _ = mt.loss_and_grads(tuple(params), x, y, pos, 1.5, 0.5)
                P[idx] += h
                fd = (lp - lm) / (2 * h)
                assert abs(fd - grads[pi][idx]) <= 1e-4 * max(abs(fd), 1e-8)


@pytest.fixture(scope="module")
def contrastive_features():
    sets = sg.generate_contrastive("D", 60, 32, seed=7)
    xs, ys = [], []
    for label, (man, imgs) in enumerate(sets):
        recs = [vz.extract_features(img, "D") for img in imgs]
        xs.append(mt.features_for_classifier(recs, "D"))
        ys.append(np.full(len(recs), label))
    return np.vstack(xs), np.concatenate(ys)


class TestTraining:
    def test_separable_classes_learned(self, contrastive_features):
        x, y = contrastive_features
        clf, report = mt.train_classifier(x, y)
        assert report.test_accuracy >= 0.9
        assert set(report.per_class_test) == {0, 1, 2}

    def test_deterministic(self, contrastive_features):
        x, y = contrastive_features
        _, r1 = mt.train_classifier(x, y)
        _, r2 = mt.train_classifier(x, y)
        assert r1.loss_history == r2.loss_history

    def test_json_round_trip(self, contrastive_features):
        x, y = contrastive_features
        clf, _ = mt.train_classifier(x, y)
        back = mt.Classifier.from_json(clf.to_json())
        np.testing.assert_array_equal(clf.predict(x), back.predict(x))

    def test_needs_three_classes(self):
        x = np.random.default_rng(8).standard_normal((20, 5))
        y = np.array([0, 1] * 10)
        with pytest.raises(mt.MitigationError):
            mt.train_classifier(x, y)

    def test_config_validation(self):
        with pytest.raises(mt.MitigationError):
            mt.MitigationConfig(lam=-1.0)
        with pytest.raises(mt.MitigationError):
            mt.MitigationConfig(tau=0.0)


class TestPositivePairs:
    def test_partners_share_class_and_differ(self):
        labels = np.array([0, 0, 1, 1, 1, 2, 2, 0])
        pos = mt._positive_pairs(labels, np.random.default_rng(9))
        for i, j in enumerate(pos):
            assert labels[i] == labels[j]
            assert i != j

    def test_singleton_class_rejected(self):
        with pytest.raises(mt.MitigationError):
            mt._positive_pairs(np.array([0, 0, 1, 2, 2]),
                               np.random.default_rng(10))


class TestFiltering:
    def test_oracle_filter_soundness(self):
        man, imgs = sg.generate_perturbed("C", 80, 32, seed=11,
                                          bias=0.05, noise_sd=0.02)
        recs = [vz.extract_features(img, "C") for img in imgs]
        kept, rejected = mt.filter_records(recs, "C", eps=0.01)
        assert len(kept) + len(rejected) == sum(r.valid for r in recs)
        for r in kept:
            assert vz.verdict(r, "C", 0.01).fine_ok
        for r in rejected:
            assert not vz.verdict(r, "C", 0.01).fine_ok

    def test_kept_set_monotone_in_eps(self):
        man, imgs = sg.generate_perturbed("B", 60, 32, seed=12,
                                          bias=0.03, noise_sd=0.02)
        recs = [vz.extract_features(img, "B") for img in imgs]
        sizes = [len(mt.filter_records(recs, "B", eps=e)[0])
                 for e in (0.001, 0.01, 0.05, 0.2)]
        assert sizes == sorted(sizes)

    def test_clean_set_fully_kept(self):
        _, imgs = sg.generate_dataset("A", 30, 32, seed=13)
        recs = [vz.extract_features(img, "A") for img in imgs]
        kept, rejected = mt.filter_records(recs, "A", eps=0.01)
        assert len(kept) == 30 and rejected == []

    def test_directory_report_improves_error(self, tmp_path):
        man, imgs = sg.generate_perturbed("D", 120, 32, seed=14,
                                          bias=0.05, noise_sd=0.02)
        sg.write_dataset(tmp_path, man, imgs)
        out = mt.filter_directory(tmp_path, "D", eps=0.01)
        assert out["before"] is not None and out["after"] is not None
        assert out["after"].error < out["before"].error
        assert sorted(out["kept"] + out["rejected"]) \
            == [f"D_{i:06}.png" for i in range(120)]

    def test_learned_filter_keeps_on_rule_class(self):
        sets = sg.generate_contrastive("D", 60, 32, seed=15)
        xs, ys, recs_by_label = [], [], []
        for label, (man, imgs) in enumerate(sets):
            recs = [vz.extract_features(img, "D") for img in imgs]
            recs_by_label.append(recs)
            xs.append(mt.features_for_classifier(recs, "D"))
            ys.append(np.full(len(recs), label))
        clf, _ = mt.train_classifier(np.vstack(xs), np.concatenate(ys))
        kept, _ = mt.filter_records(recs_by_label[1], "D", classifier=clf)
        assert len(kept) >= 0.9 * len(recs_by_label[1])
        kept_off, _ = mt.filter_records(recs_by_label[0], "D",
                                        classifier=clf)
        assert len(kept_off) <= 0.1 * len(recs_by_label[0])
