import pytest
from hypothesis import given
from hypothesis import strategies as st

from taskvae.errors import ConfigError, DataError, ScenarioError
from taskvae.scenarios import (
    SCENARIO_REGISTRY, assign_classes, check_feasible, parse_scenario, task_stream,
)


@pytest.mark.parametrize("text,counts", [("4-5-2", (4, 5, 2)), ("(3-3)", (3, 3)), (" 6 ", (6,))])
def test_parse(text, counts):
    assert parse_scenario(text).counts == counts


@pytest.mark.parametrize("text", ["", "4--2", "a-b", "4-0-2", "3,3", "-3"])
def test_parse_rejects(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_scenario_error_is_config_error():
    assert issubclass(ScenarioError, ConfigError)


def test_registry_scenarios_are_feasible():
    for ds, scenarios in SCENARIO_REGISTRY.items():
        for s in scenarios:
            check_feasible(ds, parse_scenario(s))


def test_infeasible():
    with pytest.raises(ScenarioError, match="needs 7 classes"):
        check_feasible("uci_har", parse_scenario("4-3"))
    with pytest.raises(ScenarioError, match="tasks"):
        check_feasible("uci_har", parse_scenario("1-1-1-1-1"))
    with pytest.raises(ScenarioError):
        check_feasible("synthetic", parse_scenario("3-3-1"), n_classes=6)


@given(st.lists(st.integers(1, 3), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
def test_assign_classes_partitions(counts, seed):
    pool = list(range(sum(counts) + 2))
    sc = parse_scenario("-".join(map(str, counts)))
    specs = assign_classes(sc, pool, seed)
    news = [c for s in specs for c in s.new_classes]
    assert len(news) == len(set(news)) == sum(counts)
    for i, s in enumerate(specs):
        assert len(s.new_classes) == counts[i]
        assert s.seen_classes == tuple(news[: sum(counts[: i + 1])])
        assert set(s.old_classes) == set(s.seen_classes) - set(s.new_classes)
    assert specs == assign_classes(sc, pool, seed)


def test_assign_too_many():
    with pytest.raises(ScenarioError):
        assign_classes(parse_scenario("3-3"), range(5), 0)


def test_task_stream_cumulative_test(small_ds):
    specs = assign_classes(parse_scenario("2-2-2"), small_ds.class_registry.values(), 0)
    stream = task_stream(specs, small_ds)
    for task in stream:
        assert set(task.train.classes()) == set(task.spec.new_classes)
        assert set(task.test.classes()) == set(task.spec.seen_classes)
    assert len(stream[-1].test) == len(small_ds.test)


def test_task_stream_class_without_data(small_ds):
    sel = small_ds.train.select_classes([0, 1, 2, 3, 4])
    from dataclasses import replace
    ds = replace(small_ds, train=sel)
    specs = assign_classes(parse_scenario("3-3"), range(6), 0)
    with pytest.raises(DataError, match="5"):
        task_stream(specs, ds)
