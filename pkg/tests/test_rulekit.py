import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from implyloss.dataio import Dataset
from implyloss.rulekit import (
    ABSTAIN,
    CoverageMatrix,
    Rule,
    RuleError,
    TabularClause,
    apply_rules,
    coverage_stats,
    filter_rules,
    load_rules,
    majority_vote,
    rule_labels,
    rule_precisions,
    save_rules,
    validate_exemplars,
)


def fixture_coverage():
    # 3 instances; rule 0 -> class 0, rule 1 -> class 1
    return CoverageMatrix([(0, 0), (0, 1), (1, 0)], 3, 2), np.array([0, 1])


def test_fixture_stats():
    cov, rl = fixture_coverage()
    st_ = coverage_stats(cov, rl, np.arange(3))
    assert round(st_.percent_cover, 1) == 66.7
    assert st_.percent_conflict == 50.0
    assert st_.avg_cover_size == 1.5
    assert st_.rules_per_covered_instance == 1.5
    assert st_.micro_precision is None
    assert st_.table_row() == ("66.7", "-", "50.0", "1.5", "1.5")


def test_single_perfect_rule_stats():
    cov = CoverageMatrix([(i, 0) for i in range(4)], 4, 1)
    st_ = coverage_stats(cov, np.array([1]), np.arange(4), gold=np.ones(4, dtype=int))
    assert (st_.percent_cover, st_.percent_conflict, st_.micro_precision) == (100.0, 0.0, 100.0)


def test_stats_need_instances():
    cov, rl = fixture_coverage()
    with pytest.raises(ValueError):
        coverage_stats(cov, rl, np.array([], dtype=int))


def _text_dataset(texts):
    n = len(texts)
    return Dataset(np.zeros((n, 1)), ["U"] * n, texts=list(texts))


def test_regex_rule_requires_adjacent_words():
    rule = Rule(0, 1, "regex", pattern=".* guaranteed gift .*")
    texts = ["Great News! Call FREEFONE 08006344447 to claim your guaranteed å£1000 CASH", "a guaranteed gift awaits"]
    assert rule.fires_text(texts).tolist() == [False, True]


def test_wordlist_rule_matches_tokens():
    rule = Rule(0, 0, "wordlist", words=("Who", "whom"))
    assert rule.fires_text(["WHO is there?", "whose cat", "to whom"]).tolist() == [True, False, True]


def test_bad_regex_reports_offset():
    with pytest.raises(RuleError, match="offset"):
        Rule(3, 0, "regex", pattern="ab(c")


def test_backreference_rejected():
    with pytest.raises(RuleError, match="backreference"):
        Rule(0, 0, "regex", pattern=r"(a)\1")


def test_tabular_clause_example():
    rule = Rule(0, 1, "tabular", clauses=(TabularClause("age", "<=", 30), TabularClause("education-num", "<=", 12)))
    cols = {"age": np.array([25, 40]), "education-num": np.array([10, 10])}
    assert rule.fires_table(cols, 2).tolist() == [True, False]


def test_tabular_unknown_feature():
    rule = Rule(0, 1, "tabular", clauses=(TabularClause("income", ">", 5),))
    with pytest.raises(RuleError, match="income"):
        rule.fires_table({"age": np.array([1])}, 1)


def test_categorical_clause():
    c = TabularClause("sex", "=", "Male")
    assert c.holds(np.array(["Male", "Female"], dtype=object)).tolist() == [True, False]


def test_empty_rule_set_gives_empty_coverage():
    cov = apply_rules([], _text_dataset(["x", "y"]))
    assert len(cov) == 0 and cov.n_rules == 0


def test_apply_rules_idempotent():
    ds = _text_dataset(["who are you", "where now", "who where"])
    rules = [Rule(0, 0, "wordlist", words=("who",)), Rule(1, 1, "regex", pattern="where")]
    assert apply_rules(rules, ds) == apply_rules(rules, ds)
    assert apply_rules(rules, ds).pairs.tolist() == [[0, 0], [1, 1], [2, 0], [2, 1]]


def test_validate_exemplars_examples():
    cov = CoverageMatrix([(0, 2)], 2, 3)
    rl = np.array([0, 1, 1])
    assert validate_exemplars([(0, 2)], cov, np.array([1, 0]), rl) == []
    problems = [i.problem for i in validate_exemplars([(1, 2)], cov, np.array([1, 1]), rl)]
    assert problems == ["uncovered exemplar"]
    problems = [i.problem for i in validate_exemplars([(0, 2)], cov, np.array([0, 0]), rl)]
    assert problems == ["label mismatch"]


def test_majority_vote_examples():
    cov = CoverageMatrix([(0, 0), (0, 1), (0, 2), (1, 0), (1, 2)], 3, 3)
    rl = np.array([0, 0, 1])
    assert majority_vote(0, cov, rl) == 0
    assert majority_vote(1, cov, rl) == 0  # tie -> lowest class id
    assert majority_vote(1, cov, np.array([1, 0, 0])) == 0
    assert majority_vote(1, cov, rl, default_class=1) == 1
    assert majority_vote(2, cov, rl) == ABSTAIN


def _two_rule_fixture():
    # rule 0 precision 0.95 (19/20), rule 1 precision 0.5 (10/20)
    pairs = [(i, 0) for i in range(20)] + [(i, 1) for i in range(20, 40)]
    gold = np.array([0] * 19 + [1] + [1] * 10 + [0] * 10)
    rules = [Rule(0, 0, "wordlist", words=("a",)), Rule(1, 1, "wordlist", words=("b",))]
    return rules, CoverageMatrix(pairs, 40, 2), gold


def test_filter_precision_above():
    rules, cov, gold = _two_rule_fixture()
    assert np.allclose(rule_precisions(cov, rule_labels(rules), gold), [0.95, 0.5])
    kept_rules, kept_cov, kept = filter_rules(rules, cov, ("precision_above", 0.9), gold=gold)
    assert kept == [1]
    assert [r.id for r in kept_rules] == [0] and kept_rules[0].label == 1
    assert kept_cov.n_rules == 1 and len(kept_cov) == 20


def test_filter_ids_and_all():
    rules = [Rule(j, j % 2, "wordlist", words=(f"w{j}",)) for j in range(9)]
    cov = CoverageMatrix([(j, j) for j in range(9)], 9, 9)
    new, new_cov, kept = filter_rules(rules, cov, ("ids", [3, 7]))
    assert kept == [0, 1, 2, 4, 5, 6, 8]
    assert [r.id for r in new] == list(range(7))
    assert new_cov.cover_set(3).tolist() == [4]
    empty, empty_cov, kept = filter_rules(rules, cov, ("all", None))
    assert empty == [] and kept == [] and len(empty_cov) == 0


def test_rules_json_round_trip(tmp_path):
    rules = [
        Rule(0, 1, "regex", pattern=r"^how (many|much)\b", exemplars=(4,)),
        Rule(1, 0, "wordlist", words=("who",), exemplars=(0, 2)),
        Rule(2, 1, "tabular", clauses=(TabularClause("age", "<=", 30), TabularClause("sex", "=", "Male"))),
    ]
    path = tmp_path / "rules.json"
    save_rules(path, rules)
    back = load_rules(path)
    assert [r.to_json() for r in back] == [r.to_json() for r in rules]
    rec = json.loads(path.read_text())
    assert rec[0]["exemplar_instance_ids"] == [4]


def test_non_dense_rule_ids_rejected(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps([{"id": 1, "label": 0, "kind": "wordlist", "words": ["a"]}]))
    with pytest.raises(RuleError):
        load_rules(path)


pair_sets = st.integers(1, 12).flatmap(
    lambda n: st.integers(1, 5).flatmap(
        lambda m: st.tuples(
            st.just(n), st.just(m),
            st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, m - 1)), max_size=40),
            st.lists(st.integers(0, 2), min_size=m, max_size=m),
        )
    )
)


@settings(max_examples=80, deadline=None)
@given(pair_sets)
def test_transpose_consistency(case):
    n, m, pairs, _ = case
    cov = CoverageMatrix(pairs, n, m)
    by_rule = sum(len(h) for h in cov.cover_lists())
    by_instance = sum(len(r) for r in cov.instance_lists())
    assert by_rule == by_instance == len(cov) == len(set(pairs))


@settings(max_examples=80, deadline=None)
@given(pair_sets)
def test_conflict_bounded_by_multi_coverage(case):
    n, m, pairs, labels = case
    cov = CoverageMatrix(pairs, n, m)
    st_ = coverage_stats(cov, np.array(labels), np.arange(n))
    per = cov.matrix.sum(axis=1)
    covered = per > 0
    multi = 100.0 * np.sum(per >= 2) / covered.sum() if covered.any() else 0.0
    assert st_.percent_conflict <= multi + 1e-9
    assert 0.0 <= st_.percent_cover <= 100.0


@settings(max_examples=60, deadline=None)
@given(pair_sets, st.lists(st.tuples(st.integers(0, 11), st.integers(0, 4)), max_size=6))
def test_validated_exemplars_are_sound(case, links):
    n, m, pairs, labels = case
    cov = CoverageMatrix(pairs, n, m)
    gold = np.array([labels[i % m] for i in range(n)])
    rl = np.array(labels)
    issues = validate_exemplars(links, cov, gold, rl)
    bad = {(i.instance, i.rule) for i in issues}
    for i, j in links:
        if (i, j) not in bad:
            assert (i, j) in cov and gold[i] == rl[j]
