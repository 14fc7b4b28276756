import math

import msgspec
import numpy as np
import pytest

from backend.app.models.fem_grid import FieldVector, ProblemCoefficients, build_mesh
from backend.app.models.parabolic_forward import ForwardConfig, spectral_mode
from backend.app.models.sensing import (
    FemTruth,
    MeasurementSet,
    NoiseKind,
    NoiseModel,
    SpectralTruth,
    add_noise,
    empirical_inner,
    empirical_norm,
    generate_measurements,
    load_measurements,
    make_jittered_sensors,
    make_sensor_set,
    make_uniform_sensors,
    save_measurements,
)
from backend.app.utils.errors import ArgumentError, ParseError, ReportIOError


def test_uniform_sensors_layout():
    sensors = make_uniform_sensors(4)
    assert sensors.n == 16
    assert np.allclose(sensors.points[0], [0.125, 0.125])
    assert np.allclose(sensors.points[1], [0.375, 0.125])
    assert sensors.d_min == pytest.approx(0.25)
    assert sensors.d_max == pytest.approx(0.125 * math.sqrt(2.0), rel=1e-9)
    assert sensors.b_bound < 1.0


def test_sensor_validation():
    with pytest.raises(ArgumentError):
        make_sensor_set(np.empty((0, 2)))
    with pytest.raises(ArgumentError):
        make_sensor_set([[0.2, 0.2], [0.2, 0.2]])
    with pytest.raises(ArgumentError):
        make_sensor_set([[0.2, 1.2]])
    with pytest.raises(ArgumentError):
        make_sensor_set([[0.5, 0.5], [0.51, 0.5]], b_config=4.0)
    with pytest.raises(ArgumentError):
        make_uniform_sensors(1)


def test_single_sensor_has_infinite_separation():
    sensors = make_sensor_set([[0.5, 0.5]], b_config=None)
    assert sensors.d_min == math.inf
    assert sensors.b_bound == 0.0


def test_jittered_sensors_are_reproducible_and_quasi_uniform():
    a = make_jittered_sensors(10, 0.2, seed=5)
    b = make_jittered_sensors(10, 0.2, seed=5)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, make_uniform_sensors(10).points)
    assert a.b_bound <= 4.0
    with pytest.raises(ArgumentError):
        make_jittered_sensors(10, 0.5, seed=5)


def test_empirical_inner_product():
    assert empirical_inner([1.0, 2.0], [3.0, 4.0]) == pytest.approx(5.5)
    assert empirical_norm([3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ArgumentError):
        empirical_inner([1.0], [1.0, 2.0])
    with pytest.raises(ArgumentError):
        empirical_inner([], [])


def test_noise_substreams_are_reproducible():
    noise = NoiseModel(kind="gaussian", sigma=0.1, seed=42)
    assert noise.kind is NoiseKind.GAUSSIAN
    assert np.array_equal(noise.draw(50, replication=3), noise.draw(50, replication=3))
    assert not np.array_equal(noise.draw(50, replication=3), noise.draw(50, replication=4))
    assert not np.array_equal(noise.draw(50), noise.draw(50, replication=0))


def test_noise_statistics():
    gaussian = NoiseModel(sigma=0.5, seed=1).draw(200_000)
    assert abs(gaussian.mean()) < 0.01
    assert gaussian.std() == pytest.approx(0.5, rel=0.01)
    bounded = NoiseModel(kind="uniform_bounded", sigma=0.5, seed=1).draw(200_000)
    assert np.abs(bounded).max() <= 0.5 * math.sqrt(3.0)
    assert bounded.std() == pytest.approx(0.5, rel=0.01)


def test_zero_sigma_returns_truth():
    sensors = make_uniform_sensors(3)
    truth = np.linspace(0.0, 1.0, sensors.n)
    data = add_noise(sensors, truth, NoiseModel(sigma=0.0, seed=9))
    assert np.array_equal(data.values, truth)
    assert np.all(data.noise_draws == 0.0)


def test_noise_model_validation():
    with pytest.raises(ArgumentError):
        NoiseModel(sigma=-1.0)
    with pytest.raises(ArgumentError):
        NoiseModel(seed=-1)
    with pytest.raises(ValueError):
        NoiseModel(kind="cauchy")


def test_measurement_set_checks_lengths():
    sensors = make_uniform_sensors(2)
    with pytest.raises(ArgumentError):
        MeasurementSet(sensors, np.zeros(3), NoiseModel())
    with pytest.raises(ArgumentError):
        MeasurementSet(sensors, np.zeros(4), NoiseModel(), truth_values=np.zeros(5))


def test_spectral_and_fem_truth_agree():
    coeff = ProblemCoefficients()
    sensors = make_uniform_sensors(5)
    spectral = SpectralTruth(coeff, (spectral_mode(1, 1, coeff),), (1.0,)).sample(sensors)
    mesh = build_mesh(1 / 32)
    fem = FemTruth(
        ForwardConfig.from_step(mesh, coeff, 1 / 64),
        FieldVector.interpolate(mesh, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)),
    ).sample(sensors)
    assert empirical_norm(fem - spectral) <= 2e-2 * empirical_norm(spectral)


def test_generate_measurements_keeps_truth():
    coeff = ProblemCoefficients()
    sensors = make_uniform_sensors(4)
    truth = SpectralTruth(coeff, (spectral_mode(1, 1, coeff),), (1.0,))
    data = generate_measurements(truth, sensors, NoiseModel(sigma=0.01, seed=3), replication=2)
    assert data.n == 16
    assert np.allclose(data.values - data.truth_values, NoiseModel(sigma=0.01, seed=3).draw(16, 2))


def test_measurement_file_roundtrip_is_bitwise(tmp_path):
    sensors = make_uniform_sensors(3)
    data = add_noise(sensors, np.linspace(0.1, 0.9, 9) / 3.0, NoiseModel(sigma=0.013, seed=11), replication=1)
    path = save_measurements(data, tmp_path / "nested" / "data.json")
    loaded = load_measurements(path)
    assert np.array_equal(loaded.values, data.values)
    assert np.array_equal(loaded.truth_values, data.truth_values)
    assert np.array_equal(loaded.sensors.points, sensors.points)
    assert loaded.noise == data.noise


def test_load_measurements_errors(tmp_path):
    with pytest.raises(ReportIOError):
        load_measurements(tmp_path / "missing.json")

    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json")
    with pytest.raises(ParseError):
        load_measurements(bad_json)

    wrong_type = tmp_path / "wrong.json"
    wrong_type.write_bytes(
        msgspec.json.encode(
            {"n": 1, "sensor_points": [[0.5, 0.5]], "values": ["x"], "noise": {"kind": "gaussian", "sigma": 0.1, "seed": 0}}
        )
    )
    with pytest.raises(ParseError, match=r"\$\.values\[0\]"):
        load_measurements(wrong_type)

    mismatch = tmp_path / "mismatch.json"
    mismatch.write_bytes(
        msgspec.json.encode(
            {"n": 2, "sensor_points": [[0.5, 0.5]], "values": [1.0], "noise": {"kind": "gaussian", "sigma": 0.1, "seed": 0}}
        )
    )
    with pytest.raises(ParseError):
        load_measurements(mismatch)


@pytest.mark.parametrize("k", [8, 16, 32])
def test_empirical_and_l2_norms_are_equivalent_for_smooth_modes(k):
    points = make_uniform_sensors(k).points
    for p in (1, 2, 3):
        for q in (1, 2, 3):
            values = np.sin(p * np.pi * points[:, 0]) * np.sin(q * np.pi * points[:, 1])
            assert 0.5 <= 0.5 / empirical_norm(values) <= 2.0


def test_gaussian_noise_tail():
    sigma = 0.001
    draws = NoiseModel(sigma=sigma, seed=11).draw(250_000)
    assert np.mean(np.abs(draws) > 3 * sigma) <= 0.005
