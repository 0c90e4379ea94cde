"""Description parsing, validation, and name resolution."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csm import parsing, validation
from csm.model import (
    AssignAction,
    CreateAction,
    CsmDescription,
    DeleteAction,
    EventChannel,
    EventDef,
    GuardDef,
    InvokeAction,
    MatchAction,
    MatchCase,
    MemoryMode,
    RaiseAction,
    ResetTimeoutAction,
    StateDef,
    StateMachineDef,
    TimeoutAction,
    TransitionDef,
    VariableDecl,
    description_to_json,
)
from csm.parsing import (
    BadValueError,
    JsonSyntaxError,
    MissingKeywordError,
    UnknownKeywordError,
    WrongTypeError,
    parse_description,
)
from csm.validation import UnresolvedReferenceError, resolve_named, validate


def desc_text(**overrides) -> str:
    doc = {
        "name": "CSM",
        "memoryMode": "shared",
        "stateMachines": [
            {
                "name": "SM1",
                "states": [
                    {"name": "Sa", "initial": True, "on": [{"event": "go", "target": "Sb"}]},
                    {"name": "Sb", "terminal": True},
                ],
            }
        ],
    }
    doc.update(overrides)
    return json.dumps(doc)


# --- parsing -----------------------------------------------------------


def test_parse_two_machine_root_with_persistent_variable():
    text = json.dumps(
        {
            "name": "CSM",
            "memoryMode": "distributed",
            "stateMachines": [
                {"name": "SM1", "states": [{"name": "Sa", "initial": True}]},
                {"name": "SM2", "states": [{"name": "Sc", "initial": True}]},
            ],
            "persistentData": [{"name": "p", "value": "5 * 5"}],
        }
    )
    desc = parse_description(text)
    assert desc.name == "CSM"
    assert desc.memoryMode is MemoryMode.DISTRIBUTED
    assert len(desc.stateMachines) == 2
    assert desc.stateMachines[0].name == "SM1"
    assert desc.persistentData == (VariableDecl("p", "5 * 5"),)
    assert desc.localData == ()


def test_parse_rejects_empty_machine_list():
    with pytest.raises(BadValueError) as e:
        parse_description(json.dumps({"name": "X", "memoryMode": "shared", "stateMachines": []}))
    assert e.value.path == "$.stateMachines"


def test_parse_state_with_static_local_and_guarded_transition():
    text = json.dumps(
        {
            "name": "CSM",
            "memoryMode": "shared",
            "stateMachines": [
                {
                    "name": "SM2",
                    "localData": [{"name": "b", "value": "[1, 2, 3]"}],
                    "states": [
                        {"name": "Sc", "initial": True},
                        {
                            "name": "Sd",
                            "on": [
                                {
                                    "event": "e",
                                    "target": "Sc",
                                    "guards": [{"expression": "g==true"}],
                                }
                            ],
                            "staticData": [{"name": "f", "value": "b.map(x, x * x)"}],
                            "localData": [{"name": "g", "value": "f.contains(x, x < 10)"}],
                        },
                    ],
                }
            ],
        }
    )
    desc = parse_description(text)
    sd = desc.stateMachines[0].state("Sd")
    assert sd.staticData == (VariableDecl("f", "b.map(x, x * x)"),)
    assert sd.localData == (VariableDecl("g", "f.contains(x, x < 10)"),)
    assert len(sd.on) == 1
    assert sd.on[0].target == "Sc"
    assert sd.on[0].guards == (GuardDef("g==true"),)
    assert not sd.initial and not sd.terminal


def test_parse_nested_machine_inside_states_array():
    text = json.dumps(
        {
            "name": "CSM",
            "memoryMode": "shared",
            "stateMachines": [
                {
                    "name": "SM2",
                    "states": [
                        {"name": "Sc", "initial": True},
                        {"name": "Sd"},
                        {"name": "SM21", "states": [{"name": "Se", "initial": True}]},
                    ],
                }
            ],
        }
    )
    sm2 = parse_description(text).stateMachines[0]
    assert [s.name for s in sm2.states] == ["Sc", "Sd"]
    assert [m.name for m in sm2.nested] == ["SM21"]
    assert sm2.nested[0].states[0].name == "Se"


def test_parse_rejects_unknown_keyword_with_path():
    bad = json.dumps(
        {
            "name": "CSM",
            "memoryMode": "shared",
            "stateMachines": [
                {
                    "name": "SM1",
                    "states": [{"name": "Sa", "initial": True, "on": [{"event": "go", "trget": "Sb"}]}],
                }
            ],
        }
    )
    with pytest.raises(UnknownKeywordError) as e:
        parse_description(bad)
    assert e.value.keyword == "trget"
    assert "on[0]" in e.value.path


def test_parse_rejects_missing_required_keyword():
    with pytest.raises(MissingKeywordError) as e:
        parse_description(json.dumps({"name": "X", "stateMachines": []}))
    assert e.value.keyword == "memoryMode"


def test_parse_rejects_wrong_type():
    with pytest.raises(WrongTypeError):
        parse_description(desc_text(stateMachines="SM1"))


def test_parse_rejects_malformed_json():
    with pytest.raises(JsonSyntaxError):
        parse_description("{not json")


def test_parse_rejects_unknown_memory_mode():
    with pytest.raises(BadValueError):
        parse_description(desc_text(memoryMode="global"))


def test_parse_rejects_peripheral_raise_channel():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM1",
                "states": [
                    {
                        "name": "Sa",
                        "initial": True,
                        "entry": [
                            {"type": "raiseEvent", "event": {"name": "e", "channel": "peripheral"}}
                        ],
                    }
                ],
            }
        ]
    )
    with pytest.raises(BadValueError):
        parse_description(text)


def test_parse_on_transition_requires_event_always_forbids_it():
    no_event = desc_text(
        stateMachines=[
            {"name": "SM1", "states": [{"name": "Sa", "initial": True, "on": [{"target": "Sa"}]}]}
        ]
    )
    with pytest.raises(MissingKeywordError):
        parse_description(no_event)
    eventful_always = desc_text(
        stateMachines=[
            {
                "name": "SM1",
                "states": [{"name": "Sa", "initial": True, "always": [{"target": "Sa", "event": "e"}]}],
            }
        ]
    )
    with pytest.raises(BadValueError):
        parse_description(eventful_always)


def test_parse_all_action_variants():
    actions = [
        {
            "type": "invoke",
            "serviceType": "svc",
            "local": True,
            "input": [{"name": "x", "value": "1"}],
            "done": [{"name": "done", "channel": "internal"}],
            "properties": [{"name": "hint", "value": 3}],
        },
        {"type": "create", "variable": {"name": "v", "value": "0"}, "persistent": False},
        {"type": "assign", "variable": {"name": "v"}, "value": "v + 1"},
        {"type": "delete", "variable": {"name": "v"}},
        {"type": "raiseEvent", "event": {"name": "e1", "channel": "external"}},
        {
            "type": "timeout",
            "name": "tick",
            "delay": "1000",
            "actions": [{"type": "raiseEvent", "event": {"name": "t", "channel": "internal"}}],
        },
        {"type": "resetTimeout", "action": "tick"},
        {
            "type": "match",
            "value": "v",
            "cases": [
                {"case": "1", "action": {"type": "assign", "variable": {"name": "v"}, "value": "0"}}
            ],
        },
    ]
    text = desc_text(
        stateMachines=[
            {
                "name": "SM1",
                "states": [{"name": "Sa", "initial": True, "entry": actions, "terminal": True}],
            }
        ]
    )
    entry = parse_description(text).stateMachines[0].states[0].entry
    assert [type(a) for a in entry] == [
        InvokeAction,
        CreateAction,
        AssignAction,
        DeleteAction,
        RaiseAction,
        TimeoutAction,
        ResetTimeoutAction,
        MatchAction,
    ]
    invoke = entry[0]
    assert invoke.serviceType == "svc" and invoke.local is True
    assert invoke.done[0].channel is EventChannel.INTERNAL
    assert entry[5].actions[0].event.name == "t"


def test_parse_timeout_requires_name():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM1",
                "states": [
                    {
                        "name": "Sa",
                        "initial": True,
                        "after": [{"type": "timeout", "delay": "100", "actions": []}],
                    }
                ],
            }
        ]
    )
    with pytest.raises(MissingKeywordError):
        parse_description(text)


# --- validation --------------------------------------------------------


def machine(**overrides) -> dict:
    base = {"name": "SM1", "states": [{"name": "Sa", "initial": True}]}
    base.update(overrides)
    return base


def test_validate_accepts_reference_to_declared_guard():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM2",
                "guards": [{"name": "guardA", "expression": "b < 100"}],
                "localData": [{"name": "b", "value": "[1, 2, 3]"}],
                "states": [
                    {
                        "name": "Sc",
                        "initial": True,
                        "on": [{"event": "e", "target": "Sd", "guards": ["guardA"]}],
                    },
                    {"name": "Sd"},
                ],
            }
        ]
    )
    report = validate(parse_description(text))
    assert report.errors == []
    assert report.ok


def test_validate_flags_two_initial_states():
    text = desc_text(
        stateMachines=[
            machine(states=[{"name": "Sa", "initial": True}, {"name": "Sb", "initial": True}])
        ]
    )
    report = validate(parse_description(text))
    assert [e.code for e in report.errors] == [validation.INITIAL_STATE_COUNT]


def test_validate_flags_zero_initial_states():
    text = desc_text(stateMachines=[machine(states=[{"name": "Sa"}])])
    assert [e.code for e in validate(parse_description(text)).errors] == [validation.INITIAL_STATE_COUNT]


def test_validate_flags_distributed_root_local_data():
    text = desc_text(memoryMode="distributed", localData=[{"name": "a", "value": "1"}])
    report = validate(parse_description(text))
    assert any(e.code == validation.DISTRIBUTED_ROOT_LOCAL_DATA for e in report.errors)
    # same tree in shared mode is fine
    assert validate(parse_description(desc_text(localData=[{"name": "a", "value": "1"}]))).ok


def test_validate_flags_unknown_transition_target():
    text = desc_text(
        stateMachines=[
            machine(states=[{"name": "Sa", "initial": True, "on": [{"event": "e", "target": "Nope"}]}])
        ]
    )
    report = validate(parse_description(text))
    assert [e.code for e in report.errors] == [validation.UNKNOWN_TARGET]
    assert "Nope" in report.errors[0].message


def test_validate_flags_unresolved_guard_and_action_references():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {
                        "name": "Sa",
                        "initial": True,
                        "entry": ["missingAction"],
                        "on": [{"event": "e", "target": "Sa", "guards": ["missingGuard"]}],
                    }
                ]
            )
        ]
    )
    codes = [e.code for e in validate(parse_description(text)).errors]
    assert codes.count(validation.UNRESOLVED_REFERENCE) == 2


def test_validate_flags_duplicate_sibling_names():
    text = desc_text(
        stateMachines=[
            machine(states=[{"name": "Sa", "initial": True}, {"name": "Sa"}]),
        ]
    )
    assert any(e.code == validation.DUPLICATE_NAME for e in validate(parse_description(text)).errors)
    text = desc_text(stateMachines=[machine(), machine()])
    assert any(e.code == validation.DUPLICATE_NAME for e in validate(parse_description(text)).errors)


def test_validate_flags_reset_of_unknown_timeout():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {
                        "name": "Sa",
                        "initial": True,
                        "entry": [{"type": "resetTimeout", "action": "never-started"}],
                    }
                ]
            )
        ]
    )
    assert [e.code for e in validate(parse_description(text)).errors] == [validation.UNKNOWN_TIMEOUT]


def test_validate_accepts_reset_of_declared_timeout():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {
                        "name": "Sa",
                        "initial": True,
                        "after": [
                            {
                                "type": "timeout",
                                "name": "tick",
                                "delay": "50",
                                "actions": [
                                    {"type": "raiseEvent", "event": {"name": "t", "channel": "internal"}}
                                ],
                            }
                        ],
                        "on": [
                            {
                                "event": "t",
                                "target": "Sa",
                                "actions": [{"type": "resetTimeout", "action": "tick"}],
                            }
                        ],
                    }
                ]
            )
        ]
    )
    assert validate(parse_description(text)).ok


def test_validate_flags_non_timeout_in_after():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {
                        "name": "Sa",
                        "initial": True,
                        "after": [{"type": "create", "variable": {"name": "v", "value": "0"}}],
                    }
                ]
            )
        ]
    )
    assert [e.code for e in validate(parse_description(text)).errors] == [validation.AFTER_NOT_TIMEOUT]


def test_validate_flags_timeout_carrying_non_raise_action():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {
                        "name": "Sa",
                        "initial": True,
                        "after": [
                            {
                                "type": "timeout",
                                "name": "tick",
                                "delay": "50",
                                "actions": [{"type": "delete", "variable": {"name": "v"}}],
                            }
                        ],
                    }
                ]
            )
        ]
    )
    assert [e.code for e in validate(parse_description(text)).errors] == [
        validation.TIMEOUT_ACTION_NOT_RAISE
    ]


def test_validate_flags_unparseable_expression():
    text = desc_text(
        stateMachines=[machine(localData=[{"name": "b", "value": "1 +"}])]
    )
    assert [e.code for e in validate(parse_description(text)).errors] == [validation.EXPRESSION_SYNTAX]


def test_validate_warns_on_terminal_state_with_transitions():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {"name": "Sa", "initial": True},
                    {"name": "Sb", "terminal": True, "on": [{"event": "e", "target": "Sa"}]},
                ]
            )
        ]
    )
    report = validate(parse_description(text))
    assert report.ok
    assert [w.code for w in report.warnings] == [validation.TERMINAL_STATE_BEHAVIOR]


def test_validate_is_pure():
    desc = parse_description(desc_text())
    assert validate(desc) == validate(desc)


# --- resolve_named -----------------------------------------------------


def test_resolve_inlines_machine_guard():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM2",
                "guards": [{"name": "guardA", "expression": "b < 100"}],
                "localData": [{"name": "b", "value": "5"}],
                "states": [
                    {
                        "name": "Sc",
                        "initial": True,
                        "on": [{"event": "e", "target": "Sc", "guards": ["guardA"]}],
                    }
                ],
            }
        ]
    )
    resolved = resolve_named(parse_description(text))
    guard = resolved.stateMachines[0].states[0].on[0].guards[0]
    assert guard == GuardDef(expression="b < 100", name="guardA")


def test_resolve_unknown_reference_raises():
    text = desc_text(
        stateMachines=[
            machine(
                states=[
                    {
                        "name": "Sa",
                        "initial": True,
                        "on": [{"event": "e", "target": "Sa", "guards": ["guardZ"]}],
                    }
                ]
            )
        ]
    )
    with pytest.raises(UnresolvedReferenceError) as e:
        resolve_named(parse_description(text))
    assert e.value.name == "guardZ"


def test_resolve_nested_machine_uses_parent_declaration():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM2",
                "actions": [
                    {
                        "type": "raiseEvent",
                        "name": "actionA",
                        "event": {"name": "ping", "channel": "internal"},
                    }
                ],
                "states": [
                    {"name": "Sc", "initial": True},
                    {
                        "name": "SM21",
                        "states": [{"name": "Se", "initial": True, "entry": ["actionA"]}],
                    },
                ],
            }
        ]
    )
    resolved = resolve_named(parse_description(text))
    entry = resolved.stateMachines[0].nested[0].states[0].entry
    assert isinstance(entry[0], RaiseAction)
    assert entry[0].event.name == "ping"


def test_resolve_nearest_declaration_wins():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM2",
                "guards": [{"name": "g", "expression": "1 < 2"}],
                "states": [
                    {"name": "Sc", "initial": True},
                    {
                        "name": "SM21",
                        "guards": [{"name": "g", "expression": "3 < 4"}],
                        "states": [
                            {
                                "name": "Se",
                                "initial": True,
                                "on": [{"event": "e", "target": "Se", "guards": ["g"]}],
                            }
                        ],
                    },
                ],
            }
        ]
    )
    resolved = resolve_named(parse_description(text))
    guard = resolved.stateMachines[0].nested[0].states[0].on[0].guards[0]
    assert guard.expression == "3 < 4"


def _assert_no_references(desc: CsmDescription) -> None:
    def walk_actions(actions):
        for a in actions:
            assert not isinstance(a, str)
            if isinstance(a, TimeoutAction):
                walk_actions(a.actions)
            if isinstance(a, MatchAction):
                walk_actions([c.action for c in a.cases])

    def walk_machine(m):
        for s in m.states:
            for acts in (s.entry, s.exit, s.while_, s.after):
                walk_actions(acts)
            for t in (*s.on, *s.always):
                for g in t.guards:
                    assert not isinstance(g, str)
                walk_actions(t.actions)
        for n in m.nested:
            walk_machine(n)

    for m in desc.stateMachines:
        walk_machine(m)


def test_resolve_leaves_no_references_behind():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM2",
                "guards": [{"name": "guardA", "expression": "b < 100"}],
                "actions": [
                    {
                        "type": "timeout",
                        "name": "tick",
                        "delay": "100",
                        "actions": [
                            {"type": "raiseEvent", "event": {"name": "t", "channel": "internal"}}
                        ],
                    }
                ],
                "localData": [{"name": "b", "value": "5"}],
                "states": [
                    {
                        "name": "Sc",
                        "initial": True,
                        "after": ["tick"],
                        "on": [{"event": "t", "target": "Sc", "guards": ["guardA"]}],
                    }
                ],
            }
        ]
    )
    _assert_no_references(resolve_named(parse_description(text)))


# --- round-trip property ----------------------------------------------

_names = st.text(alphabet="abcdefgh", min_size=1, max_size=4)
_exprs = st.sampled_from(("1", "true", "x + 1", "[1, 2]", "'s'", "b.map(x, x * x)"))
_channels = st.sampled_from((EventChannel.INTERNAL, EventChannel.EXTERNAL, EventChannel.GLOBAL))

_variables = st.builds(VariableDecl, name=_names, value=_exprs)
_events = st.builds(
    EventDef,
    name=_names,
    channel=_channels,
    data=st.lists(_variables, max_size=2).map(tuple),
)

_actions = st.one_of(
    st.builds(
        InvokeAction,
        serviceType=_names,
        local=st.none() | st.booleans(),
        input=st.lists(_variables, max_size=2).map(tuple),
        done=st.lists(_events, max_size=1).map(tuple),
    ),
    st.builds(CreateAction, variable=_variables, persistent=st.none() | st.booleans()),
    st.builds(AssignAction, variable=_names, value=_exprs),
    st.builds(DeleteAction, variable=_names),
    st.builds(RaiseAction, event=_events),
    st.builds(
        TimeoutAction,
        name=_names,
        delay=_exprs,
        actions=st.lists(st.builds(RaiseAction, event=_events), max_size=2).map(tuple),
    ),
    st.builds(ResetTimeoutAction, action=_names),
    st.builds(
        MatchAction,
        value=_exprs,
        cases=st.lists(
            st.builds(MatchCase, case=_exprs, action=st.builds(RaiseAction, event=_events)),
            max_size=2,
        ).map(tuple),
    ),
)

_action_lists = st.lists(_actions, max_size=2).map(tuple)
_guards = st.lists(st.builds(GuardDef, expression=_exprs, name=st.none()), max_size=2).map(tuple)


def _transitions(state_names):
    return st.lists(
        st.builds(
            TransitionDef,
            target=st.sampled_from(state_names),
            event=_names,
            guards=_guards,
            actions=_action_lists,
        ),
        max_size=2,
    ).map(tuple)


@st.composite
def _machines(draw, depth=0):
    state_names = draw(st.lists(_names, min_size=1, max_size=3, unique=True))
    states = tuple(
        StateDef(
            name=n,
            initial=(i == 0),
            entry=draw(_action_lists),
            exit=draw(_action_lists),
            while_=draw(_action_lists),
            on=draw(_transitions(state_names)),
            always=draw(
                st.lists(
                    st.builds(
                        TransitionDef,
                        target=st.sampled_from(state_names),
                        event=st.none(),
                        guards=_guards,
                        actions=_action_lists,
                    ),
                    max_size=1,
                ).map(tuple)
            ),
            staticData=draw(st.lists(_variables, max_size=1).map(tuple)),
            localData=draw(st.lists(_variables, max_size=1).map(tuple)),
            persistentData=draw(st.lists(_variables, max_size=1).map(tuple)),
        )
        for i, n in enumerate(state_names)
    )
    nested = ()
    if depth == 0 and draw(st.booleans()):
        nested = (draw(_machines(depth=1)),)
    return StateMachineDef(
        name=draw(_names),
        states=states,
        nested=nested,
        localData=draw(st.lists(_variables, max_size=2).map(tuple)),
        persistentData=draw(st.lists(_variables, max_size=1).map(tuple)),
    )


_descriptions = st.builds(
    CsmDescription,
    name=_names,
    memoryMode=st.sampled_from((MemoryMode.SHARED, MemoryMode.DISTRIBUTED)),
    stateMachines=st.lists(_machines(), min_size=1, max_size=2).map(tuple),
    localData=st.lists(_variables, max_size=1).map(tuple),
    persistentData=st.lists(_variables, max_size=1).map(tuple),
)


@settings(max_examples=60, deadline=None)
@given(_descriptions)
def test_serialize_parse_round_trip(desc):
    assert parse_description(json.dumps(description_to_json(desc))) == desc


def test_round_trip_listing_style_document():
    text = desc_text(
        stateMachines=[
            {
                "name": "SM2",
                "guards": [{"name": "guardA", "expression": "b < 100"}],
                "localData": [{"name": "b", "value": "[1, 2, 3]"}],
                "states": [
                    {"name": "Sc", "initial": True},
                    {
                        "name": "Sd",
                        "on": [{"event": "e", "target": "Sc", "guards": [{"expression": "g==true"}]}],
                        "staticData": [{"name": "f", "value": "b.map(x, x * x)"}],
                        "localData": [{"name": "g", "value": "f.contains(x, x < 10)"}],
                    },
                    {"name": "SM21", "states": [{"name": "Se", "initial": True}]},
                ],
            }
        ],
        persistentData=[{"name": "p", "value": "5 * 5"}],
    )
    desc = parse_description(text)
    assert parse_description(json.dumps(description_to_json(desc))) == desc
