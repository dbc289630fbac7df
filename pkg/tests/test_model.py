import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from cjsmooth.model import (AgeClassMap, ModelSpec, PackedParams, ParamBlock, pack, rates_at, time_z,
                            unpack, zero_natural)
from cjsmooth.simgen import heron_shaped_spec, simulation_spec, soay_shaped_config


def hmm_spec(T=6, K=6):
    return ModelSpec(
        T=T, regime="hmm_timevarying", age_map=AgeClassMap((2,)),
        blocks=(
            ParamBlock("survival", "spline_in_covariate", age_class=1, K=K, domain=(-2, 2)),
            ParamBlock("survival", "logistic_linear_in_covariate", age_class=2),
            ParamBlock("recapture", "per_occasion"),
            ParamBlock("recovery"),
            ParamBlock("covproc_mu0"), ParamBlock("covproc_sigma0"),
            ParamBlock("covproc_mu", age_class=1), ParamBlock("covproc_mu", age_class=2),
            ParamBlock("covproc_sigma", age_class=1), ParamBlock("covproc_sigma", age_class=2),
            ParamBlock("covproc_eta", age_class=1), ParamBlock("covproc_eta", age_class=2),
        ),
        hmm_bins=10, hmm_grid=(-3, 3),
    )


def test_age_class_map():
    amap = AgeClassMap((1, 2, 7))
    assert amap.n_classes == 4
    assert [amap.class_of(a) for a in (0, 1, 2, 6, 7, 20)] == [1, 2, 3, 3, 4, 4]
    with pytest.raises(ValueError):
        AgeClassMap((2, 2))


def test_layout_dimensions():
    spec = hmm_spec(T=6, K=6)
    assert spec.n_params == 6 + 2 + 5 + 1 + 8
    assert spec.smooth_keys == ("survival[1]",)


def test_soay_shaped_dimension_is_4k_plus_62():
    spec = simulation_spec(soay_shaped_config(N=10), K=15, m=25)
    assert spec.n_params == 4 * 15 + 62
    assert spec.n_smooths == 4


def test_heron_shaped_spec():
    spec = heron_shaped_spec()
    assert spec.n_smooths == 3 and spec.n_params == 3 * 7 + 2
    assert spec.block("survival[1]").basis.spacing == pytest.approx(14.25)


def test_missing_and_invalid_blocks_rejected():
    with pytest.raises(ValueError, match="missing"):
        ModelSpec(T=5, regime="history_constant", blocks=(ParamBlock("recapture"), ParamBlock("recovery")))
    with pytest.raises(ValueError):
        ParamBlock("survival", "spline_in_covariate", age_class=1, K=3)
    with pytest.raises(ValueError):
        ParamBlock("recapture", "fixed", value=1.5)
    with pytest.raises(ValueError):
        ParamBlock("covproc_mu", "per_occasion", age_class=1)
    with pytest.raises(ValueError, match="recapture fixed"):
        ModelSpec(T=5, regime="array_global", age_map=AgeClassMap((1,)),
                  blocks=(ParamBlock("survival", age_class=1), ParamBlock("survival", age_class=2),
                          ParamBlock("recapture"), ParamBlock("recovery")))


@given(st.data())
@settings(max_examples=40, deadline=None)
def test_pack_unpack_roundtrip(data):
    spec = hmm_spec()
    theta = np.array(data.draw(st.lists(st.floats(-4, 4), min_size=spec.n_params, max_size=spec.n_params)))
    nat = unpack(spec, theta)
    back = pack(spec, nat).theta
    assert np.allclose(back, theta, atol=1e-9)


def test_natural_ranges():
    spec = hmm_spec()
    nat = zero_natural(spec)
    assert nat["recovery"] == 0.5
    assert nat["covproc_sigma0"] == 1.0
    assert nat["covproc_eta[1]"] == 1.0
    with pytest.raises(ValueError):
        pack(spec, {**nat, "covproc_eta[1]": 2.5})


def test_json_roundtrip():
    spec = hmm_spec()
    again = ModelSpec.from_json(spec.to_json())
    assert again == spec
    assert json.loads(spec.to_json())["schema_version"] == 1


def test_packed_params_layout_checked():
    spec = hmm_spec()
    with pytest.raises(ValueError):
        PackedParams(np.zeros(spec.n_params + 1), spec.layout)


def test_rates_at():
    spec = hmm_spec()
    theta = np.zeros(spec.n_params)
    theta[spec.slice_of("survival[2]")] = [0.5, 2.0]
    theta[spec.slice_of("recapture")] = np.arange(5) * 0.1
    phi, p, lam = rates_at(spec, theta, 3, 2, w=0.25)
    assert phi == pytest.approx(expit(0.5 + 2.0 * 0.25))
    assert p == pytest.approx(expit(0.1))          # occasion 3 -> second entry
    assert lam == pytest.approx(0.5)
    phi, p, lam = rates_at(spec, theta, 1, 2, w=0.0)
    assert np.isnan(p)
    with pytest.raises(ValueError):
        rates_at(spec, theta, 3, 1, w=None)


def test_time_z_standardized():
    z = time_z(9, np.arange(1, 10))
    assert z.mean() == pytest.approx(0.0, abs=1e-12) and z.std() == pytest.approx(1.0)
