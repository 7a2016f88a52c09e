import numpy as np
import pytest

from slsdeploy.cli import chain_plant
from slsdeploy.lti import LTISystem
from slsdeploy.realizations import OFSimplified, OFStandard, SFSimplified, SFStandard
from slsdeploy.stability import (SIGNALS, certify_unstable_extension, closed_loop_map_check,
                                 default_probe_horizon, internal_stability_probe,
                                 xhat_to_state_prediction)
from slsdeploy.synthesis import SparsityPattern, SynthesisSpec, quadruple_from_phiuy, synth_sf_h2

SCALAR = LTISystem.state_feedback([[0.5]], [[1.0]])


def test_default_horizon():
    assert default_probe_horizon(6) == 50
    assert default_probe_horizon(20) == 80


def test_of_probe_decays(chain3_of, chain3_phiuy):
    rep = internal_stability_probe(chain3_of, OFSimplified(chain3_of, chain3_phiuy))
    assert len(rep.grid) == 16
    assert rep.all_decayed
    assert rep.tail_matrix().shape == (4, 4)


def test_xhat_channel_matches_prediction(chain3_of, chain3_phiuy):
    rep = internal_stability_probe(chain3_of, OFSimplified(chain3_of, chain3_phiuy))
    quad = quadruple_from_phiuy(chain3_of, chain3_phiuy, 2 * rep.horizon)
    got = rep.responses[("d_xhat", "x")]
    want = xhat_to_state_prediction(chain3_of, quad.phi_xx, len(got))
    assert np.max(np.abs(got - want)) <= 1e-10


@pytest.mark.parametrize("make", [lambda s, r: SFStandard(r), lambda s, r: SFSimplified(s, r.phi_u)])
def test_sf_probe_decays(chain3, chain3_sf, make):
    rep = internal_stability_probe(chain3, make(chain3, chain3_sf))
    assert rep.all_decayed


def test_standard_of_skips_xhat_channel(chain3_of, chain3_phiuy):
    ctrl = OFStandard(quadruple_from_phiuy(chain3_of, chain3_phiuy, 60), chain3_of)
    rep = internal_stability_probe(chain3_of, ctrl)
    assert {c for c, _ in rep.grid} == {"d_x", "d_u", "d_y"}
    assert rep.all_decayed
    assert np.isnan(rep.tail_matrix()[3]).all()


def test_probe_reports_growth_without_raising():
    sys = LTISystem.state_feedback([[1.5]], [[1.0]])
    resp = synth_sf_h2(LTISystem.state_feedback([[0.5]], [[1.0]]), SynthesisSpec(2)).response
    rep = internal_stability_probe(sys, SFStandard(resp), horizon=60)
    assert not rep.all_decayed


def test_probe_csv_layout(chain3, chain3_sf):
    rep = internal_stability_probe(chain3, SFSimplified(chain3, chain3_sf.phi_u), horizon=20)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "channel," + ",".join(SIGNALS)
    assert [l.split(",")[0] for l in lines[1:]] == ["d_x", "d_u", "d_y", "d_xhat"]


@pytest.mark.parametrize("realization", ["standard", "simplified"])
def test_closed_loop_map_identity(chain3, chain3_sf, realization):
    rep = closed_loop_map_check(chain3, chain3_sf, realization=realization)
    assert rep["ok"], rep
    assert rep["beyond_horizon"] <= 1e-12


def test_closed_loop_map_unstable_plant_uses_standard():
    sys = LTISystem.state_feedback([[1.4, 0.3], [0.0, 0.8]], np.eye(2))
    resp = synth_sf_h2(sys, SynthesisSpec(3)).response
    rep = closed_loop_map_check(sys, resp)
    assert rep["realization"] == "standard" and rep["ok"]


def test_certified_extension_decays():
    resp = synth_sf_h2(SCALAR, SynthesisSpec(2)).response
    rep = certify_unstable_extension(LTISystem.state_feedback([[0.55]], [[1.0]]), [[0.5]], [[0.05]], resp)
    assert rep["margin"] == pytest.approx(0.0611111, abs=1e-6)
    assert rep["certified"] and rep["decayed"]


def test_uncertified_extension_does_not_crash():
    resp = synth_sf_h2(SCALAR, SynthesisSpec(2)).response
    rep = certify_unstable_extension(LTISystem.state_feedback([[1.5]], [[1.0]]), [[0.5]], [[1.0]], resp)
    assert rep["margin"] >= 1.0 and not rep["certified"]
    assert not rep["decayed"]


def test_extension_requires_consistent_split():
    resp = synth_sf_h2(SCALAR, SynthesisSpec(2)).response
    with pytest.raises(ValueError):
        certify_unstable_extension(LTISystem.state_feedback([[0.9]], [[1.0]]), [[0.5]], [[0.05]], resp)


def test_banded_chain_probe():
    sys = chain_plant(5)
    resp = synth_sf_h2(sys, SynthesisSpec(4, pattern=SparsityPattern.banded(1, ("phi_x", "phi_u")))).response
    assert internal_stability_probe(sys, SFSimplified(sys, resp.phi_u)).all_decayed
