import random

import pytest

from app.executor import lift
from app.ir import NodeRef, SchemaViolation, graph_workflow_from_obj
from app.nodebase import NodeSpec, build_base
from app.reformat import (
    BROADCASTER_TYPES,
    AmbiguousBroadcast,
    CleaningOptions,
    Disconnected,
    DisjointSet,
    UnsplicableBypass,
    check_connected,
    clean,
    resolve_broadcasters,
    splice_bypass,
    to_diagram,
)

LOADER = (1, "LoadImage", [], [("IMAGE", "IMAGE"), ("MASK", "MASK")])
SAVER = (3, "SaveImage", [("images", "IMAGE")], [])
REROUTE = (2, "Reroute", [("", "*")], [("", "*")])
UPSCALE = (2, "ImageScaleBy", [("image", "IMAGE")], [("IMAGE", "IMAGE")])

STRICT = CleaningOptions(lenient=False)
BROADCASTERS = BROADCASTER_TYPES


def edges(g):
    return {(lk.src_node_id, lk.src_slot, lk.dst_node_id, lk.dst_slot) for lk in g.links}


def test_reroute_is_spliced(make_graph):
    g = make_graph([LOADER, REROUTE, SAVER], [(1, 1, 0, 2, 0, "IMAGE"), (2, 2, 0, 3, 0, "IMAGE")])
    cleaned, report = clean(g)

    assert report.rejected is None
    assert edges(cleaned) == {(1, 0, 3, 0)}
    assert cleaned.links[0].value_type == "IMAGE"
    assert [(n.id, n.type_name, n.reason) for n in report.removed_nodes] == [
        (2, "Reroute", "reroute")
    ]
    assert report.spliced_links == 1
    # slot link ids follow the link table
    assert cleaned.nodes_by_id[3].inputs[0].link == cleaned.links[0].id
    assert cleaned.nodes_by_id[1].outputs[0].links == (cleaned.links[0].id,)


def test_reroute_fan_out(make_graph):
    g = make_graph(
        [LOADER, REROUTE, SAVER, (4, "PreviewImage", [("images", "IMAGE")], [])],
        [(1, 1, 0, 2, 0, "IMAGE"), (2, 2, 0, 3, 0, "IMAGE"), (3, 2, 0, 4, 0, "IMAGE")],
    )
    cleaned, report = clean(g)
    assert edges(cleaned) == {(1, 0, 3, 0), (1, 0, 4, 0)}
    assert report.spliced_links == 2


def test_bypassed_node_is_spliced(make_graph):
    g = make_graph(
        [LOADER, UPSCALE, SAVER],
        [(1, 1, 0, 2, 0, "IMAGE"), (2, 2, 0, 3, 0, "IMAGE")],
        modes={2: 4},
    )
    cleaned, report = clean(g)
    assert edges(cleaned) == {(1, 0, 3, 0)}
    assert report.removed_nodes[0].reason == "bypass"
    assert splice_bypass(g).nodes_by_id.keys() == {1, 3}


def test_muted_node_is_spliced(make_graph):
    g = make_graph(
        [LOADER, UPSCALE, SAVER],
        [(1, 1, 0, 2, 0, "IMAGE"), (2, 2, 0, 3, 0, "IMAGE")],
        modes={2: 2},
    )
    cleaned, report = clean(g)
    assert edges(cleaned) == {(1, 0, 3, 0)}
    assert report.removed_nodes[0].reason == "mute"


def test_unsplicable_bypass(make_graph):
    g = make_graph(
        [
            (1, "EmptyLatentImage", [], [("LATENT", "LATENT")]),
            (2, "VAEDecode", [("samples", "LATENT")], [("IMAGE", "IMAGE")]),
            SAVER,
        ],
        [(1, 1, 0, 2, 0, "LATENT"), (2, 2, 0, 3, 0, "IMAGE")],
        modes={2: 4},
    )
    cleaned, report = clean(g)
    assert [issue["code"] for issue in report.issues] == ["UnsplicableBypass"]
    assert report.issues[0]["value_type"] == "IMAGE"
    assert cleaned.links == ()
    assert report.rejected.startswith("Disconnected")

    with pytest.raises(UnsplicableBypass):
        clean(g, STRICT)


def test_broadcaster_fills_every_matching_input(make_graph):
    g = make_graph(
        [
            (1, "CheckpointLoaderSimple", [], [("MODEL", "MODEL"), ("CLIP", "CLIP")]),
            (2, "Anything Everywhere", [("anything", "*")], []),
            (3, "KSampler", [("model", "MODEL"), ("=seed", "INT")], [("LATENT", "LATENT")]),
            (4, "KSampler", [("model", "MODEL"), ("=seed", "INT")], [("LATENT", "LATENT")]),
        ],
        [(1, 1, 0, 2, 0, "MODEL")],
        widgets={3: [1], 4: [2]},
    )
    cleaned, report = clean(g)

    assert report.rejected is None
    assert report.added_links == 2
    assert edges(cleaned) == {(1, 0, 3, 0), (1, 0, 4, 0)}
    assert 2 not in cleaned.nodes_by_id
    assert report.removed_nodes[0].reason == "broadcaster"
    assert cleaned.extra["last_link_id"] == max(link.id for link in cleaned.links)


def test_broadcaster_only_fills_required_inputs_of_base(make_graph, provider):
    g = make_graph(
        [
            (1, "CheckpointLoaderSimple", [], [("MODEL", "MODEL")]),
            (2, "Anything Everywhere", [("anything", "*")], []),
            (3, "ModelMergeSimple", [("model1", "MODEL"), ("model2", "MODEL")], []),
        ],
        [(1, 1, 0, 2, 0, "MODEL")],
    )
    # without a base, every non-widget input counts as required
    assert len(resolve_broadcasters(g).links) == 2

    spec = NodeSpec("ModelMergeSimple", ("model1", "model2"), (), required_inputs=("model1",))
    filled = resolve_broadcasters(g, base=build_base([spec], provider))
    assert edges(filled) == {(1, 0, 3, 0)}


def test_ambiguous_broadcast(make_graph):
    g = make_graph(
        [
            (1, "CheckpointLoaderSimple", [], [("MODEL", "MODEL")]),
            (2, "UNETLoader", [], [("MODEL", "MODEL")]),
            (3, "Anything Everywhere", [("anything", "*")], []),
            (4, "Anything Everywhere", [("anything", "*")], []),
            (5, "KSampler", [("model", "MODEL")], []),
        ],
        [(1, 1, 0, 3, 0, "MODEL"), (2, 2, 0, 4, 0, "MODEL")],
    )
    _, report = clean(g)
    assert report.rejected.startswith("AmbiguousBroadcast")

    with pytest.raises(AmbiguousBroadcast) as e:
        clean(g, STRICT)
    assert e.value.broadcaster_ids == [3, 4]


def test_notes_are_dropped(make_graph):
    g = make_graph(
        [LOADER, (2, "Note", [], []), SAVER, (4, "MarkdownNote", [], [])],
        [(1, 1, 0, 3, 0, "IMAGE")],
    )
    cleaned, report = clean(g)
    assert report.rejected is None
    assert set(cleaned.nodes_by_id) == {1, 3}
    assert {n.reason for n in report.removed_nodes} == {"note"}


def test_disconnected(make_graph):
    g = make_graph(
        [LOADER, (2, "SaveImage", [("images", "IMAGE")], []), (3, "LoadImage", [], [])],
        [(1, 1, 0, 2, 0, "IMAGE")],
    )
    assert str(check_connected(g)) == "Disconnected(2)"

    _, report = clean(g)
    assert report.rejected == "Disconnected: workflow has 2 connected components"

    with pytest.raises(Disconnected) as e:
        clean(g, STRICT)
    assert e.value.component_count == 2

    _, report = clean(g, CleaningOptions(require_connected=False))
    assert report.rejected is None


def test_empty_graph(make_graph):
    _, report = clean(make_graph([(1, "Note", [], [])], []))
    assert report.rejected.startswith("EmptyGraph")


def test_clean_with_base_checks_executability(make_graph, sd_base, sd_diagram):
    g = lift(sd_diagram, sd_base)
    cleaned, report = clean(g, base=sd_base)
    assert report.rejected is None
    assert cleaned == g

    g = make_graph([LOADER, (2, "MysteryNode", [("image", "IMAGE")], [])], [(1, 1, 0, 2, 0, "IMAGE")])
    _, report = clean(g, base=sd_base)
    assert report.rejected == "NotExecutable: NodeUnknown"
    assert report.issues[0]["subject"] == "MysteryNode_0"


def test_appendix_diagram_is_connected(appendix_diagram, appendix_base):
    assert check_connected(lift(appendix_diagram, appendix_base)).connected


def test_to_diagram_inverts_lift(sd_diagram, sd_base):
    assert to_diagram(lift(sd_diagram, sd_base)) == sd_diagram


def test_to_diagram_numbers_linked_nodes_only(make_graph):
    g = make_graph(
        [
            (5, "LoadImage", [], [("IMAGE", "IMAGE")]),
            (2, "LoadImage", [], [("IMAGE", "IMAGE")]),
            (9, "SaveImage", [("images", "IMAGE")], []),
        ],
        [(1, 5, 0, 9, 0, "IMAGE")],
    )
    d = to_diagram(g)
    assert d.node_refs() == [NodeRef("LoadImage", 0), NodeRef("SaveImage", 0)]


def test_second_producer_on_one_input_is_rejected(make_graph_obj):
    obj = make_graph_obj(
        [(1, "LoadImage", [], [("IMAGE", "IMAGE")]), (2, "SaveImage", [("images", "IMAGE")], [])],
        [(1, 1, 0, 2, 0, "IMAGE"), (2, 1, 0, 2, 0, "IMAGE")],
    )
    obj["nodes"][1]["inputs"][0]["link"] = 1
    with pytest.raises(SchemaViolation) as e:
        graph_workflow_from_obj(obj)
    assert e.value.path == "/links/1/4"


def test_link_disowned_by_its_input_is_rejected(make_graph_obj):
    obj = make_graph_obj(
        [(1, "LoadImage", [], [("IMAGE", "IMAGE")]), (2, "SaveImage", [("images", "IMAGE")], [])],
        [(3, 1, 0, 2, 0, "IMAGE")],
    )
    obj["nodes"][1]["inputs"][0]["link"] = 7
    with pytest.raises(SchemaViolation) as e:
        graph_workflow_from_obj(obj)
    assert e.value.path == "/links/0/0"


def test_disjoint_set():
    ds = DisjointSet([1, 2, 3, 4])
    assert ds.union(1, 2)
    assert not ds.union(2, 1)
    ds.union(3, 4)
    assert ds.count() == 2
    ds.union(1, 4)
    assert ds.count() == 1 and ds.find(3) == ds.find(2)


# ── Randomized properties ─────────────────────────────────────────────────────


def random_graph(rng):
    """Chain-connected IMAGE DAG with pass-throughs, notes and an optional MODEL broadcast.

    Returns the graph spec plus the producer/consumer edges cleaning must preserve.
    """
    n = rng.randint(2, 12)
    parents = {i: rng.sample(range(1, i), min(i - 1, rng.randint(1, 2))) for i in range(2, n + 1)}
    consumers = set(rng.sample(range(1, n + 1), rng.randint(1, n))) if rng.random() < 0.5 else set()

    nodes = []
    expected = set()
    loader = n + 1
    for i in range(1, n + 1):
        inputs = [(f"in{s}", "IMAGE") for s in range(len(parents.get(i, [])))]
        if i in consumers:
            expected.add((loader, 0, i, len(inputs)))
            inputs.append(("model", "MODEL"))
        nodes.append((i, f"Step{i % 3}", inputs, [("IMAGE", "IMAGE")]))

    links = []
    modes = {}
    next_node, next_link = n + 1, 1

    if consumers:
        nodes.append((loader, "ModelLoader", [], [("MODEL", "MODEL")]))
        src, next_node = loader, next_node + 1
        for _ in range(rng.randint(0, 2)):
            nodes.append((next_node, "Reroute", [("", "*")], [("", "*")]))
            links.append((next_link, src, 0, next_node, 0, rng.choice(["MODEL", "*"])))
            src, next_node, next_link = next_node, next_node + 1, next_link + 1
        nodes.append((next_node, rng.choice(BROADCASTERS), [("anything", "*")], []))
        links.append((next_link, src, 0, next_node, 0, rng.choice(["MODEL", "*"])))
        next_node, next_link = next_node + 1, next_link + 1

    for dst, srcs in parents.items():
        for slot, src in enumerate(srcs):
            expected.add((src, 0, dst, slot))
            via = rng.random()
            if via < 0.3:
                nodes.append((next_node, "Reroute", [("", "*")], [("", "*")]))
            elif via < 0.5:
                nodes.append((next_node, "ImageBlur", [("image", "IMAGE")], [("IMAGE", "IMAGE")]))
                modes[next_node] = rng.choice([2, 4])
            else:
                links.append((next_link, src, 0, dst, slot, "IMAGE"))
                next_link += 1
                continue
            links.append((next_link, src, 0, next_node, 0, "IMAGE"))
            links.append((next_link + 1, next_node, 0, dst, slot, "IMAGE"))
            next_node, next_link = next_node + 1, next_link + 2

    for _ in range(rng.randint(0, 2)):
        nodes.append((next_node, "Note", [], []))
        next_node += 1

    rng.shuffle(nodes)
    return nodes, links, modes, expected


@pytest.mark.parametrize("seed", range(200))
def test_cleaning_preserves_producers_and_is_idempotent(make_graph, seed):
    nodes, links, modes, expected = random_graph(random.Random(seed))
    g = make_graph(nodes, links, modes=modes)

    cleaned, report = clean(g)
    assert report.rejected is None
    assert report.issues == []
    assert edges(cleaned) == expected
    assert {node.type_name for node in cleaned.nodes} <= {"Step0", "Step1", "Step2", "ModelLoader"}
    assert all(link.value_type != "*" for link in cleaned.links)

    d = to_diagram(cleaned)
    assert len(d.links) == len(expected)
    assert not set(d.type_names()) & {"Reroute", "ImageBlur", "Note", *BROADCASTERS}

    again, second = clean(cleaned)
    assert again == cleaned
    assert second.removed_nodes == [] and second.spliced_links == 0
