from datetime import datetime, timezone

import numpy as np
import pytest

from cvss_predict.cvss import parse_vector
from cvss_predict.embeddings import (DESC_ONLY, DESC_PLUS_CWE, DimensionMismatch, EmbeddingCache,
                                     EmbeddingClient, EmbeddingMatrix, FeatureLayout,
                                     RecordFeaturizer, build_feature_matrix, build_features,
                                     cwe_field_text, embed_texts)
from cvss_predict.ingest import CveRecord, CweEntry, EnrichedRecord
from cvss_predict.llm import LlmError

VEC = "CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H"
SQLI = CweEntry("CWE-89", "sql desc", "sql consequences", "sql mitigations")
XSS = CweEntry("CWE-79", "xss desc", "xss consequences", "")


def embed(text):
    return [float(len(text)), float(text.count("s")), 1.0]


def rec(n, cwes=()):
    r = CveRecord(f"CVE-2024-{n:04d}", f"description {n}", datetime(2024, 1, 1, tzinfo=timezone.utc),
                  VEC, parse_vector(VEC), 9.8, tuple(c.id for c in cwes))
    return EnrichedRecord(r, tuple(cwes))


@pytest.fixture
def server(mock_server):
    return mock_server(embed=embed)


class TestClient:
    def test_embed_shape_and_order(self, server):
        client = EmbeddingClient(server.url, "m")
        m = client.embed(["a", "bbb", "ss"])
        assert m.values.tolist() == [embed("a"), embed("bbb"), embed("ss")]
        assert m.dim == 3 and m.rows == 3 and client.dim_ == 3

    def test_duplicates_sent_once(self, server):
        EmbeddingClient(server.url, "m").embed(["x", "y", "x"])
        assert server.embed_requests[0]["input"] == ["x", "y"]

    def test_batching(self, server):
        client = EmbeddingClient(server.url, "m", batch_size=2)
        client.embed(["a", "b", "c", "d", "e"])
        assert [len(r["input"]) for r in server.embed_requests] == [2, 2, 1]

    def test_cache_hit_makes_no_requests(self, server, tmp_path):
        first = EmbeddingClient(server.url, "m", cache_dir=tmp_path)
        a = first.embed(["one", "two"])
        assert len(server.embed_requests) == 1
        second = EmbeddingClient(server.url, "m", cache_dir=tmp_path)
        b = second.embed(["two", "one"])
        assert len(server.embed_requests) == 1 and second.n_requests == 0
        assert b.values.tolist() == a.values[::-1].tolist()

    def test_cache_is_per_model(self, server, tmp_path):
        EmbeddingClient(server.url, "m1", cache_dir=tmp_path).embed(["one"])
        EmbeddingClient(server.url, "m2", cache_dir=tmp_path).embed(["one"])
        assert len(server.embed_requests) == 2
        assert len(EmbeddingCache(tmp_path, "m1")) == 1

    def test_partial_cache(self, server, tmp_path):
        EmbeddingClient(server.url, "m", cache_dir=tmp_path).embed(["one"])
        EmbeddingClient(server.url, "m", cache_dir=tmp_path).embed(["one", "two"])
        assert server.embed_requests[1]["input"] == ["two"]

    def test_inconsistent_dim(self, mock_server):
        server = mock_server(embed=lambda t: [0.0] * len(t))
        with pytest.raises(DimensionMismatch):
            EmbeddingClient(server.url, "m").embed(["ab", "abc"])

    def test_http_error(self, mock_server):
        server = mock_server(statuses=[500])
        with pytest.raises(LlmError):
            EmbeddingClient(server.url, "m").embed(["x"])

    def test_function_wrapper(self, server):
        assert embed_texts(server.url, "m", ["abc"]).values.tolist() == [embed("abc")]

    def test_matrix_rejects_nan(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(np.array([[np.nan]]), "m")


class TestFeatures:
    def test_desc_only(self, server):
        X, layout = build_feature_matrix([rec(1), rec(2)], DESC_ONLY, EmbeddingClient(server.url, "m"))
        assert X.shape == (2, 3)
        assert layout == FeatureLayout((("description", 0, 3),))

    def test_desc_plus_cwe_layout(self, server):
        X, layout = build_feature_matrix([rec(1, [SQLI, XSS]), rec(2)], DESC_PLUS_CWE,
                                         EmbeddingClient(server.url, "m"))
        assert X.shape == (2, 12)
        assert [name for name, _, _ in layout.segments] == [
            "description", "cwe_description", "cwe_consequences", "cwe_mitigations"]
        assert X[0, 3:6].tolist() == embed("sql desc\n\nxss desc")
        assert X[0, 9:12].tolist() == embed("sql mitigations")
        # record without CWE text: zero segments
        assert not X[1, 3:].any()

    def test_field_text_skips_empty(self):
        assert cwe_field_text(rec(1, [XSS, SQLI]), "cwe_mitigations") == "sql mitigations"

    def test_single_record(self, server):
        row = build_features(rec(3), DESC_ONLY, EmbeddingClient(server.url, "m"))
        assert row.tolist() == embed("description 3")

    def test_bad_mode(self, server):
        with pytest.raises(ValueError):
            build_feature_matrix([rec(1)], "cwe-only", EmbeddingClient(server.url, "m"))

    def test_layout_json(self):
        layout = FeatureLayout.for_mode(DESC_PLUS_CWE, 5)
        assert FeatureLayout.from_json(layout.to_json()) == layout
        assert layout.size == 20

    def test_transformer(self, server):
        f = RecordFeaturizer(EmbeddingClient(server.url, "m"), DESC_PLUS_CWE)
        X = f.fit_transform([rec(1, [SQLI]), rec(2)])
        assert X.shape == (2, 12) and f.n_features_out_ == 12
        assert f.get_params()["mode"] == DESC_PLUS_CWE
