"""Scope chains, context lifecycles, and store backends."""

import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csm.data import (
    AlreadyExistsError,
    DataContext,
    DuplicateNameError,
    InMemoryStore,
    OutOfScopeError,
    RemoteStore,
    ScopeChain,
    StoreServer,
    declare_block,
    declare_persistent,
)
from csm.expr import evaluate_text
from csm.model import VariableDecl


def figure_tree():
    """The two-machine example tree: SM1 owns a; its state Sb owns c,d,e;
    SM2 owns b; states Sc, Sd own f, g; nested SM21's state Se owns h."""
    store = InMemoryStore()
    store.put("p", 25)
    root = ScopeChain((), store)

    sm1 = DataContext("local", "SM1", {"a": 1})
    sm2 = DataContext("local", "SM2", {"b": 2})
    sb = DataContext("local", "Sb", {"c": 3, "d": 4, "e": 5})
    sa = DataContext("local", "Sa", {})
    sc = DataContext("local", "Sc", {"f": 6})
    sd = DataContext("local", "Sd", {"g": 7})
    sm21 = DataContext("local", "SM21", {})
    se = DataContext("local", "Se", {"h": 8})

    chains = {
        "Sa": root.child(sm1).child(sa),
        "Sb": root.child(sm1).child(sb),
        "SM2": root.child(sm2),
        "Sc": root.child(sm2).child(sc),
        "Sd": root.child(sm2).child(sd),
        "Se": root.child(sm2).child(sm21).child(se),
    }
    return chains, store


ALL_NAMES = set("abcdefgh")


def accessible(chain) -> set:
    return {n for n in ALL_NAMES if chain.try_resolve(n)[0]}


def test_scope_matrix_matches_tree():
    chains, _ = figure_tree()
    assert accessible(chains["Se"]) == {"h", "b"}
    assert accessible(chains["Sa"]) == {"a"}
    assert accessible(chains["Sb"]) == {"c", "d", "e", "a"}
    assert accessible(chains["SM2"]) == {"b"}


def test_sibling_subtrees_are_sealed_off():
    chains, _ = figure_tree()
    # Sd reaches neither SM21's nor Sc's data
    with pytest.raises(OutOfScopeError):
        chains["Sd"].resolve("h")
    with pytest.raises(OutOfScopeError):
        chains["Sd"].resolve("f")
    assert accessible(chains["Sd"]) == {"g", "b"}


def test_persistent_name_resolves_from_every_component():
    chains, _ = figure_tree()
    for chain in chains.values():
        assert chain.resolve("p") == 25


def test_inner_frame_shadows_outer_and_store():
    store = InMemoryStore()
    store.put("x", "store")
    outer = DataContext("local", "m", {"x": "outer"})
    inner = DataContext("local", "s", {"x": "inner"})
    chain = ScopeChain((), store).child(outer).child(inner)
    assert chain.resolve("x") == "inner"
    chain.delete("x")  # removes the innermost binding only
    assert chain.resolve("x") == "outer"
    chain.delete("x")
    assert chain.resolve("x") == "store"


# --- lexical declaration -----------------------------------------------


def enter_sd(machine_ctx, static_ctx):
    """Declaration sequence for a state owning static f and local g."""
    local_ctx = DataContext("local", "Sd")
    chain = ScopeChain((machine_ctx,)).child(static_ctx).child(local_ctx)
    declare_block(
        (VariableDecl("f", "b.map(x, x * x)"),), static_ctx, chain, skip_existing=True
    )
    declare_block((VariableDecl("g", "f.contains(x, x < 10)"),), local_ctx, chain)
    return chain, local_ctx


def test_first_entry_evaluates_static_then_local_in_order():
    machine_ctx = DataContext("local", "SM2", {"b": [1, 2, 3]})
    static_ctx = DataContext("static", "Sd")
    chain, _ = enter_sd(machine_ctx, static_ctx)
    assert chain.resolve("f") == [1, 4, 9]
    assert chain.resolve("g") is True


def test_static_value_survives_reentry_local_recomputed():
    machine_ctx = DataContext("local", "SM2", {"b": [1, 2, 3]})
    static_ctx = DataContext("static", "Sd")
    chain, local_ctx = enter_sd(machine_ctx, static_ctx)
    chain.assign("f", [100])
    local_ctx.entries.clear()  # state exit destroys local context
    chain2, _ = enter_sd(machine_ctx, static_ctx)
    assert chain2.resolve("f") == [100]
    assert chain2.resolve("g") is False


def test_duplicate_declaration_in_one_context_rejected():
    ctx = DataContext("local", "S")
    chain = ScopeChain(()).child(ctx)
    decls = (VariableDecl("x", "1"), VariableDecl("x", "2"))
    with pytest.raises(DuplicateNameError):
        declare_block(decls, ctx, chain)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(min_value=-1000, max_value=1000), max_size=4), max_size=8))
def test_static_retention_under_arbitrary_assignments(writes):
    machine_ctx = DataContext("local", "SM2", {"b": [2]})
    static_ctx = DataContext("static", "Sd")
    chain, local_ctx = enter_sd(machine_ctx, static_ctx)
    for w in writes:
        chain.assign("f", w)
    at_exit = chain.resolve("f")
    local_ctx.entries.clear()
    chain2, _ = enter_sd(machine_ctx, static_ctx)
    assert chain2.resolve("f") == at_exit


# --- dynamic create / assign / delete ----------------------------------


def test_create_then_assign_increments():
    ctx = DataContext("local", "S")
    chain = ScopeChain(()).child(ctx)
    chain.create("v", 0)
    chain.assign("v", evaluate_text("v + 1", chain.environment()))
    assert chain.resolve("v") == 1


def test_assign_after_delete_is_out_of_scope():
    ctx = DataContext("local", "S")
    chain = ScopeChain(()).child(ctx)
    chain.create("v", 0)
    chain.delete("v")
    with pytest.raises(OutOfScopeError):
        chain.assign("v", 1)


def test_create_twice_in_same_context_rejected():
    chain = ScopeChain(()).child(DataContext("local", "S"))
    chain.create("v", 0)
    with pytest.raises(AlreadyExistsError):
        chain.create("v", 1)


def test_create_shadows_outer_without_touching_it():
    outer = DataContext("local", "m", {"v": "old"})
    chain = ScopeChain((outer,)).child(DataContext("local", "s"))
    chain.create("v", "new")
    assert chain.resolve("v") == "new"
    assert outer.entries["v"] == "old"


def test_assign_writes_to_defining_context():
    outer = DataContext("local", "m", {"v": 0})
    inner = DataContext("local", "s")
    chain = ScopeChain((outer,)).child(inner)
    chain.assign("v", 9)
    assert outer.entries["v"] == 9
    assert "v" not in inner.entries


def test_create_persistent_lands_in_store():
    store = InMemoryStore()
    a = ScopeChain((DataContext("local", "A"),), store)
    b = ScopeChain((DataContext("local", "B"),), store)
    a.create("v", 0, persistent=True)
    assert b.resolve("v") == 0
    with pytest.raises(AlreadyExistsError):
        b.create("v", 1, persistent=True)


def test_lexical_persistent_is_put_if_absent():
    store = InMemoryStore()
    store.put("p", "kept")
    chain = ScopeChain((), store)
    declare_persistent((VariableDecl("p", "5 * 5"), VariableDecl("q", "5 * 5")), chain)
    assert store.get("p") == "kept"
    assert store.get("q") == 25


# --- TCP store backend -------------------------------------------------


@pytest.fixture()
def store_server():
    server = StoreServer().start()
    yield server
    server.shutdown()
    server.server_close()


def test_remote_store_round_trips_between_clients(store_server):
    host, port = store_server.address
    a = RemoteStore(host, port)
    b = RemoteStore(host, port)
    try:
        a.put("k", {"nested": [1, 2.5, "s", None, True]})
        assert b.get("k") == {"nested": [1, 2.5, "s", None, True]}
        a.put("blob", b"\x00\xff")
        assert b.get("blob") == b"\x00\xff"
        assert b.delete("k") is True
        assert b.delete("k") is False
        assert a.lookup("k") == (False, None)
    finally:
        a.close()
        b.close()


def test_remote_store_latency_injection_slows_each_operation(store_server):
    host, port = store_server.address
    fast = RemoteStore(host, port)
    slow = RemoteStore(host, port, inject_latency_ms=30)
    try:
        fast.put("k", 1)
        t0 = time.perf_counter()
        fast.get("k")
        fast_elapsed = time.perf_counter() - t0
        t0 = time.perf_counter()
        slow.get("k")
        slow_elapsed = time.perf_counter() - t0
        assert slow_elapsed >= 0.025
        assert slow_elapsed > fast_elapsed
    finally:
        fast.close()
        slow.close()
