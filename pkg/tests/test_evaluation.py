import numpy as np
import pytest
import torch
from sklearn.metrics import f1_score

from archtrace.core import DatasetManifest, LabelSpace, filter_split
from archtrace.evaluation import (AttackSpec, attack, build_study_manifests,
                                  build_zoo_suite, compute_report,
                                  cross_test_suite, default_attack, evaluate,
                                  patch_position_study, robustness_eval,
                                  save_suite_summary, zero_strength_attack)
from archtrace.model import AttributionNet
from archtrace.sampler import PatchPlan
from helpers import synth_natural


@pytest.fixture(scope="module")
def untrained_net():
    torch.manual_seed(0)
    net = AttributionNet(2)
    net.eval()
    return net


ZOO_LABELS = LabelSpace(("InfoMaxGAN", "ProGAN"))
PLAN = PatchPlan(resize_size=128, patch_size=64)


class TestComputeReport:
    def test_oracle_predictor(self):
        labels = LabelSpace(tuple("abcde"))
        y = np.repeat(np.arange(5), 4)
        rep = compute_report(y, y, labels, "t")
        assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0
        assert (rep.confusion == np.diag([4] * 5)).all()

    def test_constant_predictor_balanced(self):
        labels = LabelSpace(tuple("abcde"))
        y = np.repeat(np.arange(5), 10)
        rep = compute_report(y, np.zeros_like(y), labels, "t")
        assert rep.accuracy == pytest.approx(0.2)

    def test_row_sums_are_class_counts(self):
        rng = np.random.default_rng(0)
        labels = LabelSpace(tuple("abc"))
        y = rng.integers(0, 3, 60)
        p = rng.integers(0, 3, 60)
        rep = compute_report(y, p, labels, "t")
        for k in range(3):
            assert rep.confusion[k].sum() == (y == k).sum()

    def test_macro_f1_matches_sklearn(self):
        rng = np.random.default_rng(1)
        labels = LabelSpace(tuple("abcd"))
        for _ in range(20):
            y = rng.integers(0, 4, 50)
            p = rng.integers(0, 4, 50)
            rep = compute_report(y, p, labels, "t")
            want = f1_score(y, p, labels=list(range(4)), average="macro")
            if len(set(y.tolist())) == 4:
                assert rep.macro_f1 == pytest.approx(want, rel=1e-9)

    def test_absent_class_excluded_and_flagged(self):
        labels = LabelSpace(tuple("abc"))
        y = np.array([0, 0, 1, 1])
        p = np.array([0, 1, 1, 1])
        rep = compute_report(y, p, labels, "t")
        assert rep.excluded_classes == ("c",)
        per_class = f1_score(y, p, labels=[0, 1], average="macro")
        assert rep.macro_f1 == pytest.approx(per_class, rel=1e-9)


class TestEvaluate:
    def test_report_and_permutation_invariance(self, untrained_net, tiny_zoo):
        d, manifest = tiny_zoo
        test = filter_split(manifest, split="test")
        rep = evaluate(untrained_net, test, ZOO_LABELS, PLAN, manifest_base=d)
        assert rep.confusion.sum() == len(test)
        rng = np.random.default_rng(0)
        perm = list(rng.permutation(len(test)))
        shuffled = DatasetManifest(tuple(test.records[i] for i in perm))
        rep2 = evaluate(untrained_net, shuffled, ZOO_LABELS, PLAN, manifest_base=d)
        assert rep.accuracy == rep2.accuracy
        assert (rep.confusion == rep2.confusion).all()

    def test_cross_test_suite_keys(self, untrained_net, tiny_zoo):
        d, manifest = tiny_zoo
        suite = build_zoo_suite(manifest)
        reports = cross_test_suite(untrained_net, suite, ZOO_LABELS, PLAN, d)
        assert set(reports) == set(suite)

    def test_zoo_suite_split_rules(self, tiny_zoo):
        _, manifest = tiny_zoo
        suite = build_zoo_suite(manifest)
        assert all(r.seed == 0 for r in suite["closed"])
        assert all(r.seed >= 1 for r in suite["cross_seed"])
        train_paths = {r.image_path for r in filter_split(manifest, split="train")}
        assert not train_paths & {r.image_path for r in suite["closed"]}

    def test_summary_persistence(self, untrained_net, tiny_zoo, tmp_path):
        d, manifest = tiny_zoo
        rep = evaluate(untrained_net, filter_split(manifest, split="val"),
                       ZOO_LABELS, PLAN, manifest_base=d, split_name="closed")
        path = save_suite_summary({"closed": rep}, tmp_path)
        import json
        summary = json.loads(path.read_text())
        assert summary["closed"]["accuracy"] == pytest.approx(rep.accuracy)
        assert (tmp_path / "closed.report.txt").exists()
        assert (tmp_path / "closed.confusion.csv").exists()


class TestAttacks:
    IMG = None

    @classmethod
    def setup_class(cls):
        cls.IMG = synth_natural(0, 128)

    @pytest.mark.parametrize("kind", ["noise", "blur", "crop", "jpeg", "relight"])
    def test_zero_strength_is_identity(self, kind):
        out = attack(self.IMG, zero_strength_attack(kind, seed=3))
        assert (out == self.IMG).all()

    @pytest.mark.parametrize("kind", ["noise", "blur", "crop", "jpeg", "relight",
                                      "combination"])
    def test_deterministic(self, kind):
        spec = default_attack(kind, seed=9)
        a = attack(self.IMG, spec)
        b = attack(self.IMG, spec)
        assert (a == b).all()
        assert a.shape == self.IMG.shape
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_seed_changes_combination(self):
        a = attack(self.IMG, default_attack("combination", seed=1))
        b = attack(self.IMG, default_attack("combination", seed=2))
        assert not (a == b).all()

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            AttackSpec("warp", {}, 0)

    def test_out_of_range_params_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            AttackSpec("noise", {"sigma_max": 1.0}, 0)

    def test_combination_has_no_zero_strength(self):
        with pytest.raises(ValueError):
            zero_strength_attack("combination")


class TestRobustnessEval:
    def test_zero_strength_equals_plain(self, untrained_net, tiny_zoo):
        d, manifest = tiny_zoo
        test = filter_split(manifest, split="test")
        plain = evaluate(untrained_net, test, ZOO_LABELS, PLAN, manifest_base=d)
        specs = [zero_strength_attack(k, 0) for k in ("noise", "crop", "relight")]
        reports = robustness_eval(untrained_net, test, ZOO_LABELS, specs, PLAN, d)
        for rep in reports.values():
            assert rep.accuracy == plain.accuracy
            assert (rep.confusion == plain.confusion).all()

    def test_one_entry_per_kind(self, untrained_net, tiny_zoo):
        d, manifest = tiny_zoo
        test = filter_split(manifest, split="test")
        specs = [default_attack(k, 0) for k in ("noise", "jpeg")]
        reports = robustness_eval(untrained_net, test, ZOO_LABELS, specs, PLAN, d)
        assert set(reports) == {"noise", "jpeg"}

    def test_empty_attacks_rejected(self, untrained_net, tiny_zoo):
        d, manifest = tiny_zoo
        with pytest.raises(ValueError):
            robustness_eval(untrained_net, manifest, ZOO_LABELS, [], PLAN, d)


class TestStudy:
    def test_build_architecture_manifests(self, tiny_zoo):
        _, manifest = tiny_zoo
        train, test, labels = build_study_manifests(manifest, "architecture", 6, 3)
        assert labels.class_names == ("InfoMaxGAN", "ProGAN")
        assert len(train) == 12 and len(test) == 6
        assert all(r.seed == 0 for r in train)

    def test_build_weight_manifests(self, tiny_zoo):
        _, manifest = tiny_zoo
        train, test, labels = build_study_manifests(manifest, "weight", 6, 3,
                                                    weight_arch="ProGAN")
        assert labels.class_names == ("ProGAN_s0", "ProGAN_s1")
        assert all(r.architecture_id == "ProGAN" for r in train)
        assert {r.class_label for r in train} == {"ProGAN_s0", "ProGAN_s1"}

    def test_insufficient_records_rejected(self, tiny_zoo):
        _, manifest = tiny_zoo
        with pytest.raises(ValueError, match="records"):
            build_study_manifests(manifest, "architecture", 20, 20)

    def test_unknown_task(self, tiny_zoo):
        _, manifest = tiny_zoo
        with pytest.raises(ValueError):
            build_study_manifests(manifest, "style", 2, 2)

    def test_position_study_smoke(self, tiny_zoo, tmp_path):
        from archtrace.core import ExperimentConfig
        d, manifest = tiny_zoo
        config = ExperimentConfig(class_names=("x", "y"), resize_size=128,
                                  patch_size=32, patches_per_image=1,
                                  per_class_batch=2, learning_rate=1e-3,
                                  max_epochs=2, checkpoint_epoch=2, rng_seed=0)
        accs = patch_position_study("weight", 1, config, manifest, d, tmp_path,
                                    pcl=True, train_per_class=6, test_per_class=3,
                                    weight_arch="InfoMaxGAN")
        assert accs.shape == (16,)
        assert ((accs >= 0) & (accs <= 1)).all()
        assert (tmp_path / "weight_pos01_accuracies.csv").exists()

    def test_invalid_position(self, tiny_zoo, tmp_path):
        from archtrace.core import ExperimentConfig
        _, manifest = tiny_zoo
        config = ExperimentConfig(class_names=("x", "y"))
        with pytest.raises(ValueError):
            patch_position_study("weight", 0, config, manifest, None, tmp_path)
