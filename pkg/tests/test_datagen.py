from collections import Counter

import numpy as np
import pytest

from src.domain.models import GenerationError, Seed, Table
from src.infrastructure.repositories import JsonlDatasetRepository
from src.use_cases.datagen import (
    COMPOSITIONAL_TEMPLATES,
    MIXED,
    STRUCTURE_DIMS,
    GenSpec,
    GenStats,
    TransitionMatrix,
    dataset_v0,
    gen_dataset,
    gen_mixable_table,
    gen_table,
    mixability_alphabet,
    perturb_consistency,
)
from src.use_cases.rng import derive_rng
from src.use_cases.sqlexec import parse_sql, run_query


class TestTables:
    def test_dims_stay_in_range(self):
        spec = GenSpec()
        rng = derive_rng(Seed(0), "test", 0)
        for _ in range(200):
            table = gen_table(spec, rng)
            assert 6 <= table.n_rows <= 8 and 6 <= table.n_cols <= 8

    def test_degenerate_range(self):
        table = gen_table(GenSpec(rows=(1,), cols=(1,)), derive_rng(Seed(0), "test", 0))
        assert (table.n_rows, table.n_cols) == (1, 1)

    def test_dims_uniform(self):
        spec = GenSpec()
        rng = derive_rng(Seed(1), "test", 0)
        counts = Counter(gen_table(spec, rng).n_rows for _ in range(10_000))
        for value in (6, 7, 8):
            assert abs(counts[value] / 10_000 - 1 / 3) < 0.02


class TestConsistency:
    @pytest.fixture
    def table(self):
        return gen_table(GenSpec(), derive_rng(Seed(2), "test", 0))

    def test_rate_zero_is_identity(self, table):
        assert perturb_consistency(table, 0.0, np.random.default_rng(0), "77") == table

    def test_rate_one_replaces_everything(self, table):
        out = perturb_consistency(table, 1.0, np.random.default_rng(0), "77")
        assert all(cell == "77" for row in out.rows for cell in row)
        assert out.headers == table.headers

    def test_replacement_fraction(self):
        table = Table.from_lists([f"c{c}" for c in range(1, 11)], [["1000"] * 10 for _ in range(1000)])
        out = perturb_consistency(table, 0.4, np.random.default_rng(3), "5")
        fraction = sum(cell == "5" for row in out.rows for cell in row) / 10_000
        assert abs(fraction - 0.4) < 0.02

    def test_v0_fixed_per_dataset(self):
        spec = GenSpec.for_suite("consistency", 20, Seed(4), consistency_rate=0.4)
        larger = GenSpec.for_suite("consistency", 500, Seed(4), consistency_rate=0.4)
        assert dataset_v0(spec) == dataset_v0(larger)

    def test_mixed_rate_accepted(self):
        spec = GenSpec.for_suite("consistency", 5, Seed(4), consistency_rate=MIXED)
        assert len(list(gen_dataset(spec))) == 5

    def test_bad_rate(self):
        with pytest.raises(GenerationError):
            GenSpec.for_suite("consistency", 5, Seed(4), consistency_rate=0.3)


class TestMixability:
    def _index(self, spec):
        return {value: i for i, value in enumerate(mixability_alphabet(spec))}

    def test_fully_determined_rows(self):
        spec = GenSpec(rows=(6,), cols=(8,), seed=Seed(5))
        first = [0, 3, 7, 11, 15, 19]
        a = gen_mixable_table(spec, 1.0, np.random.default_rng(1), first_column=first)
        b = gen_mixable_table(spec, 1.0, np.random.default_rng(2), first_column=first)
        assert a == b

    def test_uniform_transitions(self):
        spec = GenSpec(rows=(8,), cols=(8,), seed=Seed(6))
        index = self._index(spec)
        rng = np.random.default_rng(7)
        counts = Counter()
        for _ in range(300):
            for row in gen_mixable_table(spec, 0.0, rng).rows:
                counts.update(index[v] for v in row[1:])
        total = sum(counts.values())
        assert len(counts) == spec.alphabet_size
        assert max(abs(c / total - 1 / spec.alphabet_size) for c in counts.values()) < 0.01

    def test_half_mixed_successor_rate(self):
        spec = GenSpec(rows=(8,), cols=(8,), seed=Seed(8))
        index = self._index(spec)
        successor = TransitionMatrix.deterministic(spec.seed, spec.alphabet_size)
        rng = np.random.default_rng(9)
        hits = total = 0
        while total < 50_000:
            for row in gen_mixable_table(spec, 0.5, rng).rows:
                states = [index[v] for v in row]
                for prev, nxt in zip(states, states[1:]):
                    hits += successor.successor(prev) == nxt
                    total += 1
        assert abs(hits / total - (0.5 + 0.5 / spec.alphabet_size)) < 0.03

    def test_matrix_rows_are_distributions(self):
        with pytest.raises(GenerationError):
            TransitionMatrix(np.array([[0.5, 0.4], [0.5, 0.5]]))


class TestDataset:
    def test_deterministic_files(self, tmp_path):
        spec = GenSpec(n_examples=100, seed=Seed(7))
        repo = JsonlDatasetRepository()
        repo.write(gen_dataset(spec), tmp_path / "a.jsonl")
        repo.write(gen_dataset(spec), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_workers_do_not_change_output(self):
        spec = GenSpec(n_examples=30, seed=Seed(3))
        assert list(gen_dataset(spec, workers=1)) == list(gen_dataset(spec, workers=2))

    def test_answers_reexecute(self):
        for example in gen_dataset(GenSpec(n_examples=50, seed=Seed(1))):
            assert run_query(example.query, example.table).values == example.answer

    def test_structure_suite_leaves_training_range(self):
        spec = GenSpec.for_suite("structure", 60, Seed(2))
        for example in gen_dataset(spec):
            rows, cols = example.table.n_rows, example.table.n_cols
            assert rows in STRUCTURE_DIMS and cols in STRUCTURE_DIMS
            assert not (6 <= rows <= 8 and 6 <= cols <= 8)

    def test_compositional_only_under_its_suite(self):
        train = list(gen_dataset(GenSpec(n_examples=200, seed=Seed(3))))
        assert not any("in (" in ex.query and "limit" in ex.query for ex in train)
        stats = GenStats()
        list(gen_dataset(GenSpec.for_suite("compositional", 50, Seed(3)), stats))
        assert set(stats.templates) <= set(COMPOSITIONAL_TEMPLATES)

    def test_drop_empty(self):
        stats = GenStats()
        spec = GenSpec(n_examples=40, seed=Seed(4), drop_empty=True, adversarial=True)
        examples = list(gen_dataset(spec, stats))
        assert len(examples) == 40
        assert all(ex.answer for ex in examples)
        assert stats.empty > 0

    def test_template_selection(self):
        stats = GenStats()
        spec = GenSpec(n_examples=20, seed=Seed(5), templates=("where1_eq",))
        for example in gen_dataset(spec, stats):
            assert parse_sql(example.query).atoms()[0].op == "="
        assert stats.templates == {"where1_eq": 20}

    def test_invalid_spec(self):
        with pytest.raises(GenerationError):
            GenSpec(templates=("nope",))
        with pytest.raises(GenerationError):
            GenSpec(mixability=1.5)
