import json

import numpy as np
import pytest

from ldn.autodiff import no_grad
from ldn.data import (
    Dataset,
    DegenerateDataError,
    ParseError,
    VersionError,
    gen_spirals,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    standardize,
)
from ldn.depth import DepthPosterior, make_prior
from ldn.network import NetworkConfig, forward_all_depths, init_network


class TestGenSpirals:
    def test_deterministic_under_seed(self):
        a = gen_spirals(100, 720.0, 0.15, seed=5)
        b = gen_spirals(100, 720.0, 0.15, seed=5)
        assert (a.x == b.x).all() and (a.y == b.y).all()
        c = gen_spirals(100, 720.0, 0.15, seed=6)
        assert (a.x != c.x).any()

    def test_class_balance(self):
        ds = gen_spirals(200, 720.0, 0.15, seed=0)
        assert (ds.y == 0).sum() == 100
        assert (ds.y == 1).sum() == 100

    def test_odd_n_rejected(self):
        with pytest.raises(ValueError):
            gen_spirals(201, 720.0, 0.15, seed=0)

    def test_zero_rotation_gives_two_rays(self):
        ds = gen_spirals(400, 0.0, 0.0, seed=1, radius=1.0)
        # phi = c*pi: class 0 along +y, class 1 along -y, both x=0
        np.testing.assert_allclose(ds.x[:, 0], 0.0, atol=1e-12)
        assert (ds.x[ds.y == 0, 1] >= 0).all()
        assert (ds.x[ds.y == 1, 1] <= 0).all()

    def test_noiseless_radius_is_linear_in_t(self):
        ds = gen_spirals(300, 720.0, 0.0, seed=2, radius=1.0)
        radii = np.hypot(ds.x[:, 0], ds.x[:, 1])
        assert (radii <= 1.0 + 1e-12).all()
        ds3 = gen_spirals(300, 720.0, 0.0, seed=2, radius=3.0)
        np.testing.assert_allclose(np.hypot(ds3.x[:, 0], ds3.x[:, 1]), 3.0 * radii, atol=1e-9)

    def test_noise_statistics(self):
        clean = gen_spirals(20000, 720.0, 0.0, seed=3)
        noisy = gen_spirals(20000, 720.0, 0.15, seed=3)
        delta = noisy.x - clean.x
        assert abs(delta[:, 0].std() - 0.15) < 0.01
        assert abs(delta[:, 1].std() - 0.15) < 0.01

    def test_metadata_recorded(self):
        ds = gen_spirals(50, 540.0, 0.1, seed=9)
        assert ds.meta["rotation_deg"] == 540.0
        assert ds.meta["sigma"] == 0.1
        assert ds.meta["seed"] == 9
        assert ds.meta["n"] == 50


class TestStandardize:
    def test_already_standardized_unchanged(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((500, 2))
        x = (x - x.mean(0)) / x.std(0)
        ds = Dataset(x.copy(), np.zeros(500, dtype=np.int64))
        out, _, (mean, std) = standardize(ds)
        np.testing.assert_allclose(out.x, x, atol=1e-12)
        np.testing.assert_allclose(mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(std, 1.0, atol=1e-12)

    def test_hand_computed_column(self):
        ds = Dataset(np.array([[0.0, 0.0], [2.0, 4.0]]), np.array([0, 1]))
        out, _, _ = standardize(ds)
        np.testing.assert_allclose(out.x[:, 0], [-1.0, 1.0])
        np.testing.assert_allclose(out.x[:, 1], [-1.0, 1.0])

    def test_others_use_train_constants(self):
        train = Dataset(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([0, 1]))
        test = Dataset(np.array([[1.0, 3.0]]), np.array([0]))
        _, (test_out,), (mean, std) = standardize(train, [test])
        np.testing.assert_allclose(test_out.x, (test.x - mean) / std)
        # explicitly not test's own constants: its single row is not at 0
        assert np.any(test_out.x != 0.0)

    def test_zero_variance_rejected(self):
        ds = Dataset(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([0, 1]))
        with pytest.raises(DegenerateDataError):
            standardize(ds)


class TestDatasetFiles:
    def test_round_trip_is_value_exact(self, tmp_path):
        ds = gen_spirals(60, 720.0, 0.15, seed=4)
        path = tmp_path / "spiral.csv"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert (back.x == ds.x).all()
        assert (back.y == ds.y).all()
        assert back.meta["seed"] == 4

    def test_missing_header_is_parse_error(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ParseError, match=":1:"):
            load_dataset(path)

    def test_missing_column_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2,label\n0.0,1.0,0\n0.5,0.5\n")
        with pytest.raises(ParseError, match=":3:"):
            load_dataset(path)

    def test_non_numeric_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2,label\nzero,1.0,0\n")
        with pytest.raises(ParseError, match=":2:"):
            load_dataset(path)

    def test_seed_mismatch_detectable_from_metadata(self, tmp_path):
        a = gen_spirals(20, 720.0, 0.15, seed=1)
        b = gen_spirals(20, 720.0, 0.15, seed=2)
        save_dataset(a, tmp_path / "a.csv")
        save_dataset(b, tmp_path / "b.csv")
        meta_a = load_dataset(tmp_path / "a.csv").meta
        meta_b = load_dataset(tmp_path / "b.csv").meta
        assert meta_a["seed"] != meta_b["seed"]


def small_model(max_depth=3, seed=0):
    net = init_network(NetworkConfig(max_depth, 4, 2, 2), np.random.default_rng(seed))
    posterior = DepthPosterior(np.linspace(0.0, 1.0, max_depth + 1))
    return net, posterior


class TestCheckpoints:
    def test_round_trip_predictions_bitwise(self, tmp_path):
        net, posterior = small_model()
        # push the running stats away from their initial values first
        x = np.random.default_rng(1).standard_normal((32, 2))
        forward_all_depths(net, x, mode="train")
        path = tmp_path / "model.json"
        save_checkpoint(path, net, posterior, gamma=0.85)
        loaded_net, loaded_post, prior = load_checkpoint(path).build()

        with no_grad():
            before = forward_all_depths(net, x, mode="eval", update_running=False)
            after = forward_all_depths(loaded_net, x, mode="eval", update_running=False)
        assert (before.log_probs_stacked.data == after.log_probs_stacked.data).all()
        assert (loaded_post.logits == posterior.logits).all()
        assert prior.gamma == 0.85

    def test_version_mismatch_rejected(self, tmp_path):
        net, posterior = small_model()
        path = tmp_path / "model.json"
        save_checkpoint(path, net, posterior, gamma=0.85)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_corrupt_array_detected(self, tmp_path):
        net, posterior = small_model()
        path = tmp_path / "model.json"
        save_checkpoint(path, net, posterior, gamma=0.85)
        doc = json.loads(path.read_text())
        payload = doc["params"]["input.weight"]["data"]
        doc["params"]["input.weight"]["data"] = payload[: len(payload) // 2]
        path.write_text(json.dumps(doc))
        with pytest.raises(ParseError):
            load_checkpoint(path)

    def test_truncated_file_is_parse_error(self, tmp_path):
        net, posterior = small_model()
        path = tmp_path / "model.json"
        save_checkpoint(path, net, posterior, gamma=0.85)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(ParseError):
            load_checkpoint(path)

    def test_depth_zero_checkpoint_is_linear_model(self, tmp_path):
        net, _ = small_model(max_depth=0)
        posterior = DepthPosterior(np.zeros(1))
        path = tmp_path / "linear.json"
        save_checkpoint(path, net, posterior, gamma=0.85)
        loaded, _, _ = load_checkpoint(path).build()
        x = np.random.default_rng(2).standard_normal((8, 2))
        trace = forward_all_depths(loaded, x, mode="eval")
        assert trace.depth_count == 1
        hidden = x @ net.input_weight.data + net.input_bias.data
        logits = hidden @ net.output_weight.data + net.output_bias.data
        logits -= logits.max(axis=1, keepdims=True)
        expected = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        np.testing.assert_allclose(trace.log_prob(0), expected, atol=1e-12)
