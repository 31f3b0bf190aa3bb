import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rulekge.data import (
    DataError,
    KnowledgeGraph,
    Rule,
    Triple,
    generate_family_kg,
    load_rules,
    load_triples,
    write_rules,
    write_triples,
)
from rulekge.oracles import forward_chain, rules_hold


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadTriples:
    def test_basic_counts(self, tmp_path):
        p = write(tmp_path / "t.txt", "a\tr\tb\nb\tr\tc\n")
        graph = KnowledgeGraph()
        report = load_triples(p, graph, "train")
        assert report.added == 2
        assert graph.num_entities == 3
        assert graph.num_relations == 1
        assert len(graph.triples("train")) == 2

    def test_empty_file(self, tmp_path):
        p = write(tmp_path / "t.txt", "")
        graph = KnowledgeGraph()
        report = load_triples(p, graph, "train")
        assert report.added == 0
        assert graph.num_entities == 0

    def test_wrong_field_count_names_line(self, tmp_path):
        p = write(tmp_path / "t.txt", "a\tr\n")
        with pytest.raises(DataError, match=r":1:"):
            load_triples(p, KnowledgeGraph(), "train")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_triples(tmp_path / "absent.txt", KnowledgeGraph(), "train")

    def test_duplicates_deduped_with_count(self, tmp_path):
        p = write(tmp_path / "t.txt", "a\tr\tb\na\tr\tb\n")
        graph = KnowledgeGraph()
        report = load_triples(p, graph, "train")
        assert report.added == 1
        assert report.duplicates == 1
        assert len(graph.triples("train")) == 1

    def test_duplicates_rejected_on_request(self, tmp_path):
        p = write(tmp_path / "t.txt", "a\tr\tb\na\tr\tb\n")
        with pytest.raises(DataError, match="duplicate"):
            load_triples(p, KnowledgeGraph(), "train", on_duplicate="error")

    def test_unseen_valid_entities_flagged(self, tmp_path):
        graph = KnowledgeGraph()
        load_triples(write(tmp_path / "train.txt", "a\tr\tb\n"), graph, "train")
        report = load_triples(write(tmp_path / "valid.txt", "a\tr\tz\n"), graph, "valid")
        assert report.unseen_entities == ["z"]
        assert "z" in graph.entities

    def test_interning_is_contiguous_and_injective(self, tmp_path):
        p = write(tmp_path / "t.txt", "a\tr\tb\nb\tq\tc\n")
        graph = KnowledgeGraph()
        load_triples(p, graph, "train")
        ids = [graph.entities.id(n) for n in ("a", "b", "c")]
        assert ids == [0, 1, 2]
        assert len(set(ids)) == 3


class TestLoadRules:
    @pytest.fixture
    def graph(self, tmp_path):
        g = KnowledgeGraph()
        load_triples(
            write(tmp_path / "t.txt", "x\tbornIn\ty\nx\tnationality\ty\nx\tspouse\ty\n"),
            g,
            "train",
        )
        return g

    def test_implication_parsed(self, tmp_path, graph):
        p = write(tmp_path / "r.txt", "implication\tbornIn\tnationality\t0.9\n")
        rules, skipped = load_rules(p, graph, 0.8)
        assert skipped == 0
        assert len(rules) == 1
        assert rules[0].kind == "implication"
        assert rules[0].confidence == 0.9

    def test_below_threshold_filtered(self, tmp_path, graph):
        p = write(tmp_path / "r.txt", "symmetric\tspouse\t0.7\n")
        rules, _ = load_rules(p, graph, 0.8)
        assert rules == []

    def test_composition_arity_error(self, tmp_path, graph):
        p = write(tmp_path / "r.txt", "composition\tbornIn\tnationality\t0.9\n")
        with pytest.raises(DataError, match="3 relation"):
            load_rules(p, graph, 0.8)

    def test_unknown_kind_error(self, tmp_path, graph):
        p = write(tmp_path / "r.txt", "sometimes\tbornIn\t0.9\n")
        with pytest.raises(DataError, match="unknown rule kind"):
            load_rules(p, graph, 0.8)

    def test_unknown_relation_skipped_and_counted(self, tmp_path, graph):
        p = write(tmp_path / "r.txt", "symmetric\tfriendOf\t0.9\nsymmetric\tspouse\t0.9\n")
        rules, skipped = load_rules(p, graph, 0.8)
        assert skipped == 1
        assert len(rules) == 1

    def test_bad_confidence(self, tmp_path, graph):
        with pytest.raises(DataError, match="confidence"):
            load_rules(write(tmp_path / "r.txt", "symmetric\tspouse\thigh\n"), graph)
        with pytest.raises(DataError, match="confidence"):
            load_rules(write(tmp_path / "r2.txt", "symmetric\tspouse\t1.5\n"), graph)

    def test_rule_round_trip(self, tmp_path, graph):
        rules = [
            Rule("implication", (graph.relations.id("bornIn"), graph.relations.id("nationality")), 0.9),
            Rule("symmetric", (graph.relations.id("spouse"),), 1.0),
        ]
        p = tmp_path / "r.txt"
        write_rules(p, graph, rules)
        back, skipped = load_rules(p, graph, 0.0)
        assert skipped == 0
        assert back == rules


class TestRuleType:
    def test_arity_enforced(self):
        with pytest.raises(ValueError):
            Rule("symmetric", (0, 1), 1.0)
        with pytest.raises(ValueError):
            Rule("composition", (0, 1), 1.0)

    def test_confidence_bounds(self):
        with pytest.raises(ValueError):
            Rule("symmetric", (0,), 1.2)


name_strategy = st.text(
    st.characters(codec="utf-8", exclude_characters="\t\n\r"), min_size=1, max_size=8
)


class TestRoundTrip:
    @settings(max_examples=30, deadline=None)
    @given(raw=st.lists(st.tuples(name_strategy, name_strategy, name_strategy), min_size=1, max_size=20))
    def test_write_then_load_preserves_resolved_triples(self, raw, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("rt")
        graph = KnowledgeGraph()
        for h, r, t in raw:
            graph.add(
                "train",
                Triple(graph.entities.intern(h), graph.relations.intern(r), graph.entities.intern(t)),
            )
        p = tmp / "out.txt"
        write_triples(p, graph, "train")
        back = KnowledgeGraph()
        load_triples(p, back, "train")
        original = {
            (graph.entities.name(t.head), graph.relations.name(t.relation), graph.entities.name(t.tail))
            for t in graph.triples("train")
        }
        reloaded = {
            (back.entities.name(t.head), back.relations.name(t.relation), back.entities.name(t.tail))
            for t in back.triples("train")
        }
        assert original == reloaded


class TestFamilyGenerator:
    def test_single_family_shape(self):
        graph, rules = generate_family_kg(1, seed=7)
        assert graph.num_entities == 4  # two parents, two children
        assert {r.kind for r in rules} == {"symmetric", "inverse", "composition", "irreflexive"}

    def test_spouse_both_directions_in_closure(self):
        graph, rules = generate_family_kg(1, seed=7)
        facts = {t.as_tuple() for s in ("train", "valid", "test") for t in graph.triples(s)}
        spouse = graph.relations.id("spouse")
        forward = [(h, r, t) for (h, r, t) in facts if r == spouse]
        assert forward
        for h, r, t in forward:
            assert (t, r, h) in facts

    def test_union_closed_under_emitted_rules(self):
        for seed in (0, 7):
            graph, rules = generate_family_kg(3, seed=seed, entailment_pairs=True)
            facts = {t.as_tuple() for s in ("train", "valid", "test") for t in graph.triples(s)}
            assert rules_hold(facts, rules)

    def test_heldout_conclusions_derivable_from_train(self):
        graph, rules = generate_family_kg(4, seed=11, holdout_fraction=0.4)
        train = {t.as_tuple() for t in graph.triples("train")}
        closure = forward_chain(train, rules)
        for split in ("valid", "test"):
            for t in graph.triples(split):
                assert t.as_tuple() in closure

    def test_same_seed_identical_files(self, tmp_path):
        for i in (1, 2):
            graph, _ = generate_family_kg(3, seed=42, entailment_pairs=True)
            for split in ("train", "valid", "test"):
                write_triples(tmp_path / f"{split}.{i}", graph, split)
        for split in ("train", "valid", "test"):
            a = (tmp_path / f"{split}.1").read_bytes()
            b = (tmp_path / f"{split}.2").read_bytes()
            assert a == b

    def test_zero_families_rejected(self):
        with pytest.raises(ValueError):
            generate_family_kg(0, seed=1)

    def test_adjacency_partitions_train(self):
        graph, _ = generate_family_kg(4, seed=3)
        total = sum(len(graph.adjacency(r)) for r in range(graph.num_relations))
        assert total == len(graph.triples("train"))

    def test_entailment_pairs_add_rules(self):
        _, plain = generate_family_kg(2, seed=0)
        graph, extended = generate_family_kg(2, seed=0, entailment_pairs=True)
        kinds = [r.kind for r in extended]
        assert len(extended) == len(plain) + 2
        assert "implication" in kinds and "equivalence" in kinds
        assert "caresFor" in graph.relations and "wedTo" in graph.relations
