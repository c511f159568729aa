from datetime import datetime, timezone

import pytest
import yaml

from cvss_predict.cvss import COMPONENTS, parse_vector
from cvss_predict.ingest import CveRecord, CweEntry, EnrichedRecord
from cvss_predict.prompts import (BASE, CWE_ENRICHED, DIRECT_SCORE, FEW_SHOT, NO_CWE_INFO,
                                  FewShotError, FewShotExample, FewShotSet, MissingFewShot,
                                  PromptVariant, TemplateSet, build_prompt, default_templates,
                                  per_component)

VEC = "CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H"
SQLI = CweEntry("CWE-89", "SQL injection weakness.", "Read data.", "Use prepared statements.")
XSS = CweEntry("CWE-79", "Cross-site scripting weakness.", "Run script.", "")


def make(cwes=()):
    rec = CveRecord("CVE-2024-0001", "A buffer overflow in the parser.",
                    datetime(2024, 1, 1, tzinfo=timezone.utc), VEC, parse_vector(VEC), 9.8,
                    tuple(c.id for c in cwes))
    return EnrichedRecord(rec, tuple(cwes))


class TestVariants:
    @pytest.mark.parametrize("text", ["base", "few-shot", "cwe", "direct-score", "per-component:AV"])
    def test_parse_round_trip(self, text):
        assert PromptVariant.parse(text).name == text

    @pytest.mark.parametrize("text", ["zero-shot", "per-component", "base:AV", "per-component:XX"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            PromptVariant.parse(text)


class TestBuildPrompt:
    def test_base_contents(self):
        p = build_prompt(make(), BASE)
        assert "A buffer overflow in the parser." in p
        assert "CVSS:3.1/AV:_/AC:_/PR:_/UI:_/S:_/C:_/I:_/A:_" in p
        t = default_templates()
        for c in COMPONENTS:
            assert t.definitions[c] in p

    def test_deterministic(self):
        assert build_prompt(make(), FEW_SHOT, FewShotSet.load()) == \
            build_prompt(make(), FEW_SHOT, FewShotSet.load())

    def test_few_shot_includes_examples(self):
        fs = FewShotSet.load()
        p = build_prompt(make(), FEW_SHOT, fs)
        for ex in fs.examples:
            assert ex.vector_string in p and ex.description in p
        assert p.index(fs.examples[-1].vector_string) < p.index("A buffer overflow in the parser.")

    def test_few_shot_requires_set(self):
        with pytest.raises(MissingFewShot):
            build_prompt(make(), FEW_SHOT)

    def test_cwe_without_texts_adds_one_line(self):
        base = build_prompt(make(), BASE)
        cwe = build_prompt(make(), CWE_ENRICHED)
        assert NO_CWE_INFO in cwe
        extra = [line for line in cwe.splitlines() if line not in base.splitlines()]
        assert extra == [NO_CWE_INFO]
        assert len(cwe.splitlines()) == len(base.splitlines()) + 1

    def test_cwe_entries_in_catalog_order(self):
        p = build_prompt(make([SQLI, XSS]), CWE_ENRICHED)
        assert p.index("CWE-89") < p.index("CWE-79")
        assert "Use prepared statements." in p
        assert "(none listed)" in p  # XSS has no mitigations

    def test_per_component_only_own_definition(self):
        t = default_templates()
        for comp in COMPONENTS:
            p = build_prompt(make(), per_component(comp))
            assert t.definitions[comp] in p
            others = [c for c in COMPONENTS if c != comp and t.definitions[c] in p]
            assert others == []

    def test_direct_score(self):
        p = build_prompt(make(), DIRECT_SCORE)
        assert "A buffer overflow in the parser." in p
        assert "AV:_" not in p

    def test_custom_template_dir(self, tmp_path):
        src = default_templates()
        for name, tpl in src.templates.items():
            (tmp_path / f"{name}.txt").write_text(tpl.template)
        (tmp_path / "vector.txt").write_text("V> $definitions|$context|$description")
        (tmp_path / "definitions.yaml").write_text(yaml.safe_dump({c: f"def-{c}" for c in COMPONENTS}))
        p = build_prompt(make(), BASE, templates=TemplateSet(tmp_path))
        assert p.startswith("V> def-AV")
        assert p.endswith("|A buffer overflow in the parser.")


class TestFewShotSet:
    def test_bundled_set_valid(self):
        fs = FewShotSet.load()
        assert len(fs.examples) == 3

    def test_wrong_count(self):
        ex = FewShotExample("CVE-1", "d", VEC)
        with pytest.raises(FewShotError):
            FewShotSet((ex, ex))

    def test_too_similar(self):
        a = FewShotExample("CVE-1", "d", VEC)
        b = FewShotExample("CVE-2", "d", "CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:L")
        c = FewShotExample("CVE-3", "d", "CVSS:3.1/AV:P/AC:H/PR:H/UI:R/S:C/C:L/I:L/A:N")
        with pytest.raises(FewShotError, match="differ in only 1"):
            FewShotSet((a, b, c))
