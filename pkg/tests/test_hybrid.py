import pytest

from cvss_predict.cvss import COMPONENTS, parse_vector
from cvss_predict.hybrid import (DEFAULT_ROUTING, ComponentPrediction, CveMismatch,
                                 PredictedVector, route, score_prediction, validate_routing)

TRUTH = parse_vector("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H")
OTHER = parse_vector("CVSS:3.1/AV:L/AC:H/PR:H/UI:R/S:C/C:L/I:L/A:L")


def llm(labels=None, cve="CVE-1"):
    return PredictedVector.from_labels(cve, labels if labels is not None else TRUTH.as_dict(),
                                       "llm", {c: f"ref-{c}" for c in COMPONENTS})


def emb(vector=OTHER, cve="CVE-1"):
    return PredictedVector.from_vector(cve, vector, "embedding")


class TestRoute:
    def test_default_routing(self):
        out = route(llm(), emb())
        for c in COMPONENTS:
            expected = TRUTH if DEFAULT_ROUTING[c] == "llm" else OTHER
            assert out.label(c) == expected[c]
            assert out[c].provenance == DEFAULT_ROUTING[c]
            assert not out[c].fallback
        assert out["AV"].raw_ref == "ref-AV"

    def test_fallback_on_abstain(self):
        labels = TRUTH.as_dict()
        labels["AC"] = None
        out = route(llm(labels), emb())
        assert out.label("AC") == OTHER.ac
        assert out["AC"].provenance == "embedding" and out["AC"].fallback

    def test_no_fallback(self):
        labels = TRUTH.as_dict()
        labels["AC"] = None
        out = route(llm(labels), emb(), fallback=False)
        assert out.label("AC") is None
        assert out.abstains == ["AC"]
        assert out.vector is None and score_prediction(out) is None

    def test_both_abstain(self):
        both = PredictedVector.from_labels("CVE-1", {}, "embedding")
        out = route(llm({}), both)
        assert out.abstains == list(COMPONENTS)

    def test_all_llm_routing(self):
        out = route(llm(), emb(), dict.fromkeys(COMPONENTS, "llm"))
        assert out.vector == TRUTH

    def test_cve_mismatch(self):
        with pytest.raises(CveMismatch):
            route(llm(), emb(cve="CVE-2"))

    @pytest.mark.parametrize("routing", [
        {c: "llm" for c in COMPONENTS[:-1]},
        {**dict.fromkeys(COMPONENTS, "llm"), "E": "llm"},
        {**dict.fromkeys(COMPONENTS, "llm"), "AV": "oracle"},
    ])
    def test_bad_routing(self, routing):
        with pytest.raises(ValueError):
            validate_routing(routing)


class TestPredictedVector:
    def test_score(self):
        assert score_prediction(PredictedVector.from_vector("CVE-1", TRUTH, "llm")) == 9.8

    def test_json_round_trip(self):
        labels = TRUTH.as_dict()
        labels["S"] = None
        p = route(llm(labels), emb())
        assert PredictedVector.from_json(p.to_json()) == p
        assert p.to_json()["vector"] == str(p.vector)

    def test_requires_all_components(self):
        with pytest.raises(ValueError):
            PredictedVector("CVE-1", {"AV": ComponentPrediction("N", "llm")})

    def test_rejects_illegal_label(self):
        comps = {c: ComponentPrediction(TRUTH[c], "llm") for c in COMPONENTS}
        comps["S"] = ComponentPrediction("X", "llm")
        with pytest.raises(ValueError):
            PredictedVector("CVE-1", comps)
