"""
Tests for ConfProbe prediction oracles
"""

import base64
import hashlib
import json

import numpy as np
import pytest
import requests
from pathlib import Path
from unittest.mock import patch, MagicMock

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.oracle import (
    SyntheticModel, SyntheticOracle, HttpOracle, PlaybackOracle, QueryCache,
    content_hash, payload_bytes, quantize, latent_margin, latent_margins, true_confidence, runner_up,
    analytic_scale, make_synthetic_model, sample_synthetic_dataset, sample_synthetic_images, fit_logit_scale,
    require_white_box, build_oracle, read_prediction_log,
)
from app.errors import (
    ConfigError, QueryError, OracleError, MissingPredictionError, CapabilityError, ErrorCode,
)


def tiny_binary(bias=(1.0, -1.0)):
    """1x1x1 input, h = x - 0.5, logits [h + b0, -h + b1]"""
    return SyntheticModel(
        encoder=np.array([[1.0]]),
        weights=np.array([[1.0], [-1.0]]),
        biases=np.array(bias),
        shape=(1, 1, 1),
    )


def pixel(value):
    return np.full((1, 1, 1), value)


def mock_response(status=200, payload=None):
    response = MagicMock()
    response.status_code = status
    response.json.return_value = payload if payload is not None else {}
    return response


class TestContentHash:
    """Tests for query payloads and their hashes"""

    def test_payload_is_little_endian_float32(self):
        """Test payload bytes are row-major LE float32"""
        img = np.array([0.0, 0.5, 1.0]).reshape(1, 3, 1)
        assert payload_bytes(img) == np.array([0.0, 0.5, 1.0], dtype="<f4").tobytes()

    def test_hash_is_stable_and_sensitive(self):
        """Test equal images hash equally, any change alters the hash"""
        img = np.full((2, 2, 1), 0.25)
        assert content_hash(img) == content_hash(img.copy())
        other = img.copy()
        other[1, 1, 0] = 0.26
        assert content_hash(img) != content_hash(other)
        assert len(content_hash(img)) == 64

    def test_hash_is_sha256_of_payload(self):
        """Test the key is the hex SHA-256 of the float32 payload and nothing else"""
        img = np.array([0.25, 0.5, 0.75, 1.0]).reshape(2, 2, 1)
        expected = hashlib.sha256(np.array([0.25, 0.5, 0.75, 1.0], dtype="<f4").tobytes()).hexdigest()
        assert content_hash(img) == expected

    def test_quantize(self):
        """Test quantize rounds to float32 precision"""
        value = quantize(np.array([0.1]))[0]
        assert value == float(np.float32(0.1))


class TestSyntheticModel:
    """Tests for the white-box synthetic model"""

    def test_sign_rule(self):
        """Test positive margin picks class 0, negative picks class 1"""
        oracle = SyntheticOracle(tiny_binary(bias=(0.0, 0.0)))
        assert oracle.top1(pixel(0.9)) == 0
        assert oracle.top1(pixel(0.1)) == 1

    def test_ties_go_to_lowest_index(self):
        """Test equal logits pick class 0"""
        model = SyntheticModel(encoder=np.array([[1.0]]), weights=np.zeros((3, 1)),
                               biases=np.zeros(3), shape=(1, 1, 1))
        assert SyntheticOracle(model).top1(pixel(0.3)) == 0
        assert true_confidence(model, pixel(0.3)) == pytest.approx(1 / 3)

    def test_true_confidence(self):
        """Test softmax of the top class for margins 0 and 2"""
        assert true_confidence(tiny_binary(bias=(0.0, 0.0)), pixel(0.5)) == pytest.approx(0.5)
        assert true_confidence(tiny_binary(), pixel(0.5)) == pytest.approx(0.8808, abs=1e-4)

    def test_latent_margin_identical_classes(self):
        """Test identical weight rows and biases give margin 0"""
        model = SyntheticModel(encoder=np.eye(4), weights=np.ones((2, 4)), biases=np.zeros(2), shape=(2, 2, 1))
        assert latent_margin(model, np.full((2, 2, 1), 0.7), 0, 1) == 0.0

    def test_latent_margin_zero_gives_half(self):
        """Test margin 0 means probability 0.5 between the two classes"""
        model = tiny_binary(bias=(0.0, 0.0))
        assert latent_margin(model, pixel(0.5), 0, 1) == 0.0
        assert true_confidence(model, pixel(0.5)) == pytest.approx(0.5)

    def test_latent_margin_matches_loops(self):
        """Test margin against a loop-by-loop recomputation"""
        model = make_synthetic_model(shape=(3, 3, 2), d_lat=5, num_classes=4, seed=9, nonlinear=True)
        img = np.random.default_rng(0).uniform(0, 1, (3, 3, 2))
        flat = img.ravel()
        gain = model.gain_offset + model.gain_scale * abs(flat[0])
        latent = [gain * sum(model.encoder[i, j] * (flat[i] - model.input_offset) for i in range(len(flat)))
                  for j in range(5)]
        expected = sum((model.weights[2, j] - model.weights[0, j]) * latent[j] for j in range(5))
        expected += model.biases[2] - model.biases[0]
        assert latent_margin(model, img, 2, 0) == pytest.approx(expected, abs=1e-12)

    def test_latent_margin_needs_two_classes(self):
        """Test class_a == class_b is rejected"""
        with pytest.raises(ConfigError):
            latent_margin(tiny_binary(), pixel(0.5), 1, 1)

    def test_validation(self):
        """Test non-finite entries and K < 2 are rejected"""
        with pytest.raises(ConfigError):
            SyntheticModel(encoder=np.array([[np.nan]]), weights=np.ones((2, 1)), biases=np.zeros(2), shape=(1, 1, 1))
        with pytest.raises(ConfigError):
            SyntheticModel(encoder=np.ones((1, 1)), weights=np.ones((1, 1)), biases=np.zeros(1), shape=(1, 1, 1))
        with pytest.raises(ConfigError):
            SyntheticModel(encoder=np.ones((2, 1)), weights=np.ones((2, 1)), biases=np.zeros(2), shape=(1, 1, 1))

    def test_shape_mismatch(self, binary_model):
        """Test a wrongly shaped image is a configuration error"""
        with pytest.raises(ConfigError):
            SyntheticOracle(binary_model).top1(np.zeros((3, 3, 1)))

    def test_save_load(self, binary_model, tmp_path):
        """Test JSON round trip keeps answers"""
        path = tmp_path / "model.json"
        binary_model.save(path)
        loaded = SyntheticModel.load(path)
        img = np.random.default_rng(1).uniform(0, 1, (4, 4, 1))
        assert loaded.logits(img[None]).tolist() == binary_model.logits(img[None]).tolist()

    def test_load_missing(self, tmp_path):
        """Test missing model file is a configuration error"""
        with pytest.raises(ConfigError):
            SyntheticModel.load(tmp_path / "nope.json")

    def test_runner_up(self):
        """Test top-1 and second class on clean input"""
        model = SyntheticModel(encoder=np.array([[1.0]]), weights=np.zeros((3, 1)),
                               biases=np.array([0.0, 2.0, 1.0]), shape=(1, 1, 1))
        assert runner_up(model, pixel(0.5)) == (1, 2)

    def test_analytic_scale_linear(self, binary_model):
        """Test σ‖J(w_a - w_b)‖ for the linear encoder"""
        img = np.full((4, 4, 1), 0.5)
        a, b = runner_up(binary_model, img)
        direction = binary_model.encoder @ (binary_model.weights[a] - binary_model.weights[b])
        assert analytic_scale(binary_model, img, 0.1) == pytest.approx(0.1 * np.linalg.norm(direction))

    def test_batch_matches_single(self, binary_model, interior_images):
        """Test top1_batch agrees with top1"""
        oracle = SyntheticOracle(binary_model)
        assert oracle.top1_batch(interior_images) == [oracle.top1(img) for img in interior_images]

    def test_logits_independent_of_batch(self):
        """Test a row gives bit-identical logits alone and inside any batch"""
        model = make_synthetic_model(shape=(6, 6, 3), d_lat=8, num_classes=5, seed=4, nonlinear=True)
        images = sample_synthetic_images((6, 6, 3), 7, seed=2)
        stacked = model.logits(images)
        for i, img in enumerate(images):
            np.testing.assert_array_equal(model.logits(img[None])[0], stacked[i])
            np.testing.assert_array_equal(model.logits(images[i:])[0], stacked[i])

    def test_repeated_image_has_zero_margin_shift(self):
        """Test an image repeated in a batch gives exactly its own margin"""
        model = make_synthetic_model(shape=(5, 5, 1), d_lat=6, num_classes=3, seed=8, nonlinear=True)
        img = sample_synthetic_images((5, 5, 1), 1, seed=3)[0]
        alone = latent_margin(model, img, 0, 1)
        margins = latent_margins(model, np.stack([img] * 5), 0, 1)
        np.testing.assert_array_equal(margins - alone, np.zeros(5))


class TestSyntheticDataset:
    """Tests for synthetic dataset sampling"""

    def test_deterministic_and_in_range(self, binary_model):
        """Test same seed gives same data, labels within K, pixels within [0, 1]"""
        a = sample_synthetic_dataset(binary_model, 50, seed=4)
        b = sample_synthetic_dataset(binary_model, 50, seed=4)
        assert a.labels == b.labels
        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
        assert set(a.labels) <= {0, 1}
        assert min(img.min() for img in a.images) >= 0.0
        assert max(img.max() for img in a.images) <= 1.0

    def test_labels_follow_softmax(self, binary_model):
        """Test truth agrees with top-1 at roughly the mean true confidence"""
        data = sample_synthetic_dataset(binary_model, 2000, seed=5)
        oracle = SyntheticOracle(binary_model)
        predicted = oracle.top1_batch(data.images)
        acc = np.mean([p == t for p, t in zip(predicted, data.labels)])
        mean_conf = np.mean([true_confidence(binary_model, img) for img in data.images])
        assert abs(acc - mean_conf) < 0.04

    def test_default_model_is_above_chance(self):
        """Test the default generator gives a usable 10-class classifier"""
        model = make_synthetic_model()
        data = sample_synthetic_dataset(model, 1000, seed=1)
        predicted = SyntheticOracle(model).top1_batch(data.images)
        assert np.mean([p == t for p, t in zip(predicted, data.labels)]) > 0.3


class TestFitLogitScale:
    """Tests for choosing the logit scale from a target confidence"""

    WORLD = dict(shape=(8, 8, 1), d_lat=8, num_classes=10, seed=0, nonlinear=True)

    def test_hits_target_on_calibration_images(self):
        """Test mean true confidence on the calibration images equals the target"""
        scale = fit_logit_scale(0.75, **self.WORLD)
        model = make_synthetic_model(logit_scale=scale, **self.WORLD)
        images = quantize(sample_synthetic_images((8, 8, 1), 400, seed=2))
        assert np.mean([true_confidence(model, img) for img in images]) == pytest.approx(0.75, abs=1e-3)

    def test_default_world_accuracy(self):
        """Test the make-synthetic defaults give accuracy near 0.75"""
        model = make_synthetic_model(logit_scale=fit_logit_scale(0.75, **self.WORLD), **self.WORLD)
        data = sample_synthetic_dataset(model, 2000, seed=1)
        predicted = SyntheticOracle(model).top1_batch(data.images)
        acc = np.mean([p == t for p, t in zip(predicted, data.labels)])
        assert 0.69 <= acc <= 0.81

    def test_higher_target_needs_larger_scale(self):
        """Test the scale grows with the target"""
        world = dict(shape=(4, 4, 1), d_lat=4, num_classes=4, seed=1, nonlinear=True)
        assert fit_logit_scale(0.6, **world) < fit_logit_scale(0.9, **world)

    @pytest.mark.parametrize("target", [0.1, 0.05, 1.0])
    def test_unreachable_target(self, target):
        """Test targets outside (1/K, 1) are configuration errors"""
        with pytest.raises(ConfigError):
            fit_logit_scale(target, **self.WORLD)


class TestQueryCache:
    """Tests for the append-only query cache"""

    def test_second_query_is_cached(self, binary_model, interior_images):
        """Test a repeated image does not reach the inner oracle"""
        cache = QueryCache(SyntheticOracle(binary_model))
        first = cache.top1(interior_images[0])
        second = cache.top1(interior_images[0].copy())
        assert first == second
        assert cache.remote_calls == 1
        assert cache.lookups == 2
        assert cache.hits == 1

    def test_batch_dedupes_keys(self, constant_oracle):
        """Test duplicate images in one batch are forwarded once"""
        cache = QueryCache(constant_oracle)
        img = np.full((2, 2, 1), 0.5)
        assert cache.top1_batch([img, img.copy(), img]) == [3, 3, 3]
        assert constant_oracle.calls == 1
        assert cache.remote_calls == 1

    def test_persist_and_replay(self, binary_model, interior_images, tmp_path):
        """Test a warm cache replays identical labels with zero remote calls"""
        path = tmp_path / "cache.jsonl"
        cold = QueryCache(SyntheticOracle(binary_model), path)
        labels = cold.top1_batch(interior_images)
        assert cold.remote_calls == len(interior_images)

        inner = MagicMock()
        inner.shape = (4, 4, 1)
        inner.white_box = False
        warm = QueryCache(inner, path)
        assert warm.top1_batch(interior_images) == labels
        assert warm.remote_calls == 0
        inner.top1_batch.assert_not_called()

    def test_file_is_a_playback_log(self, binary_model, interior_images, tmp_path):
        """Test the cache file can drive a playback oracle"""
        path = tmp_path / "cache.jsonl"
        labels = QueryCache(SyntheticOracle(binary_model), path).top1_batch(interior_images[:5])
        playback = PlaybackOracle(path, shape=(4, 4, 1))
        assert [playback.top1(img) for img in interior_images[:5]] == labels
        lines = path.read_text().splitlines()
        assert len(lines) == 5
        assert set(json.loads(lines[0])) == {"hash", "label"}

    def test_append_only(self, constant_oracle, tmp_path):
        """Test existing entries are kept and new ones appended"""
        path = tmp_path / "cache.jsonl"
        QueryCache(constant_oracle, path).top1(np.full((1, 1, 1), 0.1))
        before = path.read_text()
        QueryCache(constant_oracle, path).top1(np.full((1, 1, 1), 0.2))
        after = path.read_text()
        assert after.startswith(before)
        assert len(after.splitlines()) == 2

    def test_torn_line_is_skipped(self, tmp_path):
        """Test a truncated trailing line is ignored"""
        path = tmp_path / "cache.jsonl"
        path.write_text('{"hash": "abc", "label": 2}\n{"hash": "de')
        assert read_prediction_log(path) == {"abc": 2}

    def test_concurrent_queries(self, binary_model, interior_images):
        """Test concurrent batches leave one label per key"""
        from concurrent.futures import ThreadPoolExecutor
        cache = QueryCache(SyntheticOracle(binary_model))
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(lambda _: cache.top1_batch(interior_images), range(8)))
        assert all(r == results[0] for r in results)
        assert len(cache.entries) == len(interior_images)
        assert cache.lookups == 8 * len(interior_images)


class TestPlaybackOracle:
    """Tests for playback of recorded predictions"""

    def test_miss_is_error(self, tmp_path):
        """Test an unrecorded image raises MissingPredictionError"""
        path = tmp_path / "log.jsonl"
        path.write_text("")
        with pytest.raises(MissingPredictionError):
            PlaybackOracle(path).top1(np.zeros((2, 2, 1)))

    def test_missing_file(self, tmp_path):
        """Test a missing log is a configuration error"""
        with pytest.raises(ConfigError):
            PlaybackOracle(tmp_path / "none.jsonl")

    def test_hit(self, tmp_path):
        """Test a recorded hash answers its label"""
        img = np.full((2, 2, 1), 0.75)
        path = tmp_path / "log.jsonl"
        path.write_text(json.dumps({"hash": content_hash(img), "label": 7}) + "\n")
        assert PlaybackOracle(path).top1(img) == 7

    def test_log_written_by_hand(self, tmp_path):
        """Test a log keyed by SHA-256 of the raw float32 pixels replays"""
        images = [np.full((2, 3, 1), v) for v in (0.1, 0.2, 0.3)]
        path = tmp_path / "external.jsonl"
        with open(path, "w") as f:
            for label, img in enumerate(images):
                key = hashlib.sha256(img.astype("<f4").tobytes()).hexdigest()
                f.write(json.dumps({"hash": key, "label": label}) + "\n")
        oracle = PlaybackOracle(path, shape=(2, 3, 1))
        assert [oracle.top1(img) for img in images] == [0, 1, 2]


class TestHttpOracle:
    """Tests for the HTTP client"""

    def test_request_format(self):
        """Test POST body carries shape and base64 float32 pixels"""
        img = np.array([0.25, 0.5]).reshape(1, 2, 1)
        with patch('app.oracle.requests.post', return_value=mock_response(200, {"label": 4})) as mock_post:
            label = HttpOracle("http://host:9000/", shape=(1, 2, 1)).top1(img)

        assert label == 4
        url = mock_post.call_args[0][0]
        body = mock_post.call_args[1]["json"]
        assert url == "http://host:9000/predict"
        assert body["shape"] == [1, 2, 1]
        assert base64.b64decode(body["pixels_b64"]) == np.array([0.25, 0.5], dtype="<f4").tobytes()

    def test_retries_then_succeeds(self):
        """Test transport failures are retried"""
        responses = [requests.exceptions.ConnectionError("down"), mock_response(503),
                     mock_response(200, {"label": 1})]
        with patch('app.oracle.requests.post', side_effect=responses) as mock_post:
            with patch('app.oracle.time.sleep'):
                assert HttpOracle("http://h", max_retries=3).top1(np.zeros((1, 1, 1))) == 1
        assert mock_post.call_count == 3

    def test_retries_exhausted(self):
        """Test bounded retries end in a QueryError"""
        with patch('app.oracle.requests.post', side_effect=requests.exceptions.Timeout("slow")) as mock_post:
            with patch('app.oracle.time.sleep'):
                with pytest.raises(QueryError) as exc:
                    HttpOracle("http://h", max_retries=2).top1(np.zeros((1, 1, 1)))
        assert mock_post.call_count == 2
        assert exc.value.recoverable

    @pytest.mark.parametrize("error", [
        requests.exceptions.ChunkedEncodingError("cut"),
        requests.exceptions.ContentDecodingError("gzip"),
        requests.exceptions.TooManyRedirects("loop"),
        requests.exceptions.InvalidURL("bad"),
    ])
    def test_any_transport_failure_is_query_error(self, error):
        """Test every requests failure is retried and ends in a QueryError"""
        with patch('app.oracle.requests.post', side_effect=error) as mock_post:
            with patch('app.oracle.time.sleep'):
                with pytest.raises(QueryError) as exc:
                    HttpOracle("http://h", max_retries=2).top1(np.zeros((1, 1, 1)))
        assert mock_post.call_count == 2
        assert exc.value.recoverable

    def test_client_error_not_retried(self):
        """Test 4xx fails immediately"""
        with patch('app.oracle.requests.post', return_value=mock_response(400)) as mock_post:
            with pytest.raises(QueryError):
                HttpOracle("http://h", max_retries=3).top1(np.zeros((1, 1, 1)))
        assert mock_post.call_count == 1

    @pytest.mark.parametrize("payload", [{}, {"label": "cat"}, {"label": -1}, {"label": True}])
    def test_bad_response(self, payload):
        """Test malformed label responses are oracle errors"""
        with patch('app.oracle.requests.post', return_value=mock_response(200, payload)):
            with pytest.raises(OracleError):
                HttpOracle("http://h").top1(np.zeros((1, 1, 1)))

    def test_label_outside_known_classes(self):
        """Test a label >= K is a bad response when K is known"""
        with patch('app.oracle.requests.post', return_value=mock_response(200, {"label": 5})):
            assert HttpOracle("http://h").top1(np.zeros((1, 1, 1))) == 5
            assert HttpOracle("http://h", num_classes=6).top1(np.zeros((1, 1, 1))) == 5
            with pytest.raises(OracleError) as exc:
                HttpOracle("http://h", num_classes=5).top1(np.zeros((1, 1, 1)))
        assert exc.value.code == ErrorCode.BAD_RESPONSE

    def test_shape_mismatch(self):
        """Test declared shape is enforced before any request"""
        with patch('app.oracle.requests.post') as mock_post:
            with pytest.raises(ConfigError):
                HttpOracle("http://h", shape=(2, 2, 1)).top1(np.zeros((1, 1, 1)))
        mock_post.assert_not_called()


class TestCapabilities:
    """Tests for white-box access"""

    def test_black_box_refused(self):
        """Test HTTP oracles have no white-box model"""
        with pytest.raises(CapabilityError):
            require_white_box(QueryCache(HttpOracle("http://h")))

    def test_cached_synthetic_unwraps(self, binary_model):
        """Test the model is reachable through the cache"""
        assert require_white_box(QueryCache(SyntheticOracle(binary_model))) is binary_model
        assert require_white_box(binary_model) is binary_model

    def test_latent_margin_needs_model(self):
        """Test white-box helpers refuse other objects"""
        with pytest.raises(CapabilityError):
            latent_margin(HttpOracle("http://h"), pixel(0.5), 0, 1)


class TestBuildOracle:
    """Tests for the oracle factory"""

    def test_synthetic(self, binary_model, tmp_path):
        """Test a synthetic config builds a cached synthetic oracle"""
        from app.config import RunConfig
        path = tmp_path / "m.json"
        binary_model.save(path)
        cfg = RunConfig(oracle="synthetic", model_path=str(path), cache_path=str(tmp_path / "c.jsonl"))
        oracle = build_oracle(cfg)
        assert isinstance(oracle, QueryCache)
        assert oracle.white_box
        assert oracle.shape == (4, 4, 1)

    def test_playback(self, tmp_path):
        """Test a playback config builds a cached playback oracle"""
        from app.config import RunConfig
        log = tmp_path / "p.jsonl"
        log.write_text("")
        cfg = RunConfig(oracle="playback", playback_path=str(log))
        assert isinstance(build_oracle(cfg, (2, 2, 1)).inner, PlaybackOracle)

    def test_http_knows_class_count(self):
        """Test the HTTP oracle receives the dataset class count"""
        from app.config import RunConfig
        cfg = RunConfig(oracle="http", endpoint="http://h:1")
        assert build_oracle(cfg, (2, 2, 1), num_classes=7).inner.num_classes == 7
