import numpy as np
import pytest

from inpaintseg.benchmark import BENCHMARK_OVERRIDES, BenchmarkData, benchmark_config, run_benchmark
from inpaintseg.config import UnknownKeyError
from inpaintseg.synthdata import SceneConfig, generate_sequence, stack_frames

from test_trainer import toy_inpainter

TINY = {"stage2_steps": 3, "batch_size": 2, "crop_size": 8, "segmenter_channels": (4, 8),
        "segmenter_bottleneck": 8, "detector.grid_h": 4, "detector.grid_w": 4,
        "detector.channels": (4, 8, 8)}


class TestBenchmarkConfig:
    def test_overrides_applied(self):
        config = benchmark_config()
        assert config.crop_size == BENCHMARK_OVERRIDES["crop_size"]
        assert config.loss.v_prior == pytest.approx(BENCHMARK_OVERRIDES["loss.v_prior"])
        assert config.loss.lambda_v == pytest.approx(BENCHMARK_OVERRIDES["loss.lambda_v"])
        # the method itself stays at its defaults
        assert (config.sampling_mode, config.routing_mode, config.objective_mode) == \
            ("importance", "separate", "both")

    def test_extra_overrides_win(self):
        assert benchmark_config({"crop_size": 32, "sampling_mode": "uniform"}).crop_size == 32

    def test_unknown_key(self):
        with pytest.raises(UnknownKeyError):
            benchmark_config({"no_such_key": 1})

    def test_invalid_value(self):
        with pytest.raises(ValueError):
            benchmark_config({"sampling_mode": "bogus"})


@pytest.fixture(scope="module")
def data():
    samples = generate_sequence(SceneConfig(image_size=32, num_frames=24, sprite_speed=2.0), 0)
    return BenchmarkData(stack_frames(samples[:16]), samples[16:], toy_inpainter())


class TestRunBenchmark:
    def test_result_fields(self, data):
        steps = []
        result = run_benchmark(data, TINY, callback=lambda m: steps.append(m["step"]))
        assert steps == [0, 1, 2]
        assert 0.0 <= result.map50 <= 1.0 and 0.0 <= result.j_measure <= 1.0
        assert result.box_area_ratio > 0 and result.overrides == TINY

    def test_deterministic(self, data):
        a, b = run_benchmark(data, TINY), run_benchmark(data, TINY)
        np.testing.assert_equal((a.map50, a.j_measure, a.box_area_ratio),
                                (b.map50, b.j_measure, b.box_area_ratio))
