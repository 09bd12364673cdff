# -*- coding: utf-8 -*-
import functools
import glob
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
from flask import current_app
from flask.cli import AppGroup

from app.bench import evaluate, load_dataset, report_emit
from app.comfy_server import ServerClient
from app.constants import APP_NAME, ENV_PREFIX, EXIT_INVALID, EXIT_OK, EXIT_TRANSPORT, EXIT_USAGE
from app.curate import CurationError, classify, enhance_description, partition, summarize_category
from app.executor import Accepted, lift, submit_many, to_api_format, validate_executable
from app.genflow import (
    Failed,
    GenerationRequest,
    GroupRewards,
    NearestNeighborBackend,
    advantages,
    generate,
    load_fewshot,
    reward,
    select_examples,
)
from app.http_api import TRANSPORT_ERRORS
from app.ir import (
    GraphWorkflow,
    diagram_from_obj,
    emit_diagram,
    emit_graph_workflow,
    graph_workflow_from_obj,
    load_json,
    parse_diagram,
    parse_graph_workflow,
)
from app.llm import LlmFailure, RemoteLlmClient
from app.nodebase import (
    NodeBase,
    emit_snapshot,
    emit_specs,
    ingest,
    merge_snapshots,
    merge_specs,
    parse_specs,
    provider_from_config,
    specs_from_object_info,
    top_k,
)
from app.refine import refine
from app.reformat import CleaningOptions, clean, to_diagram
from app.util import ComfyFlowError, dump_json, log, log_error, write_atomic

cli = AppGroup(APP_NAME, help="Compile, clean, refine, generate and benchmark ComfyUI workflows.")


# ── Plumbing ──────────────────────────────────────────────────────────────────


def _remember_config_file(ctx: click.Context, _param: click.Parameter, value: Optional[str]) -> None:
    if value:
        ctx.meta["config_file"] = value


config_option = click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    expose_value=False,
    callback=_remember_config_file,
    help="JSON file of settings (upper-case keys)",
)


def is_transport_error(error: BaseException) -> bool:
    while error is not None:
        if isinstance(error, (*TRANSPORT_ERRORS, LlmFailure)):
            return True
        error = error.__cause__  # type: ignore[assignment]
    return False


def exit_codes(f: Callable[..., Optional[int]]) -> Callable[..., None]:
    """Apply --config, run the command and translate failures into exit codes."""

    @functools.wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        from app import InvalidConfig, load_config_file  # pylint: disable=import-outside-toplevel

        ctx = click.get_current_context()
        try:
            if ctx.meta.get("config_file"):
                load_config_file(current_app, ctx.meta["config_file"])
            code = f(*args, **kwargs)
        except InvalidConfig as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_USAGE
        except ComfyFlowError as e:
            if is_transport_error(e):
                log_error("transport failure:", e)
                click.echo(f"Transport error: {e}", err=True)
                code = EXIT_TRANSPORT
            else:
                click.echo(f"Error: {type(e).__name__}: {e}", err=True)
                code = EXIT_INVALID
        ctx.exit(EXIT_OK if code is None else code)

    return wrapper


def setting(key: str, flag_value: Any = None) -> Any:
    """Environment beats flags, flags beat the config file and defaults."""
    if f"{ENV_PREFIX}_{key}" in os.environ or flag_value is None:
        return current_app.config.get(key)
    return flag_value


def read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def load_base(path: Optional[str]) -> NodeBase:
    path = setting("NODEBASE_PATH", path)
    if not path:
        raise click.UsageError("a node database is required (--nodebase or NODEBASE_PATH)")
    return ingest(read_bytes(path), provider_from_config(current_app.config))


def load_workflow(path: str, base: Optional[NodeBase] = None) -> GraphWorkflow:
    """Accept either a ComfyUI workflow or a diagram; diagrams need a node database."""
    obj = load_json(read_bytes(path))
    if isinstance(obj, list):
        if base is None:
            raise click.UsageError(f"{path} is a diagram; --nodebase is needed to lift it")
        return lift(diagram_from_obj(obj), base)
    return graph_workflow_from_obj(obj)


def llm_client() -> RemoteLlmClient:
    return RemoteLlmClient.from_config(current_app.config)


def fewshot_corpus(path: Optional[str]):
    path = setting("FEWSHOT_PATH", path)
    if not path:
        return []
    return load_fewshot(read_bytes(path))


# ── convert / clean / validate ────────────────────────────────────────────────


@cli.command("convert")
@config_option
@click.option("--to", "target", type=click.Choice(["diagram", "workflow"]), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@exit_codes
def convert(target: str, in_path: str, out_path: str, nodebase: Optional[str]) -> int:
    if target == "diagram":
        g = parse_graph_workflow(read_bytes(in_path))
        broadcasters = tuple(current_app.config["BROADCASTER_TYPES"])
        opts = CleaningOptions(require_connected=False, broadcaster_types=broadcasters)
        cleaned, report = clean(g, opts)
        if report.rejected:
            click.echo(f"Rejected: {report.rejected}", err=True)
            return EXIT_INVALID
        d = to_diagram(cleaned)
        write_atomic(out_path, emit_diagram(d))
        click.echo(f"Wrote diagram with {len(d)} links to {out_path}")
    else:
        base = load_base(nodebase)
        g = lift(parse_diagram(read_bytes(in_path)), base)
        write_atomic(out_path, emit_graph_workflow(g))
        click.echo(f"Wrote workflow with {len(g.nodes)} nodes to {out_path}")
    return EXIT_OK


_worker_state: Dict[str, Any] = {}


def _init_clean_worker(opts: CleaningOptions, specs_data: Optional[bytes], dimension: int) -> None:
    from app.nodebase import TrigramEmbeddingProvider  # pylint: disable=import-outside-toplevel

    _worker_state["opts"] = opts
    # cleaning reads specs only, so workers always embed offline
    _worker_state["base"] = (
        ingest(specs_data, TrigramEmbeddingProvider(dimension)) if specs_data else None
    )


def _clean_file(paths: Tuple[str, str]) -> Tuple[str, Dict[str, Any]]:
    in_path, out_path = paths
    try:
        g = parse_graph_workflow(read_bytes(in_path))
        cleaned, report = clean(g, _worker_state["opts"], _worker_state["base"])
    except ComfyFlowError as e:
        return os.path.basename(in_path), {"rejected": f"{type(e).__name__}: {e}"}
    if report.rejected is None:
        write_atomic(out_path, emit_graph_workflow(cleaned))
    return os.path.basename(in_path), report.to_obj()


@cli.command("clean")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False))
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--strict", is_flag=True, default=False, help="Raise on the first cleaning failure")
@exit_codes
def clean_command(
    in_path: str, out_path: str, report_path: Optional[str], nodebase: Optional[str], strict: bool
) -> int:
    opts = CleaningOptions(
        lenient=not strict, broadcaster_types=tuple(current_app.config["BROADCASTER_TYPES"])
    )
    nodebase = setting("NODEBASE_PATH", nodebase)

    if os.path.isdir(in_path):
        os.makedirs(out_path, exist_ok=True)
        jobs = [
            (path, os.path.join(out_path, os.path.basename(path)))
            for path in sorted(glob.glob(os.path.join(in_path, "*.json")))
        ]
        specs_data = read_bytes(nodebase) if nodebase else None
        with ProcessPoolExecutor(
            max_workers=current_app.config["CLEAN_PARALLELISM"],
            initializer=_init_clean_worker,
            initargs=(opts, specs_data, current_app.config["EMBEDDING_DIMENSION"]),
        ) as executor:
            reports = dict(executor.map(_clean_file, jobs))
        rejected = sorted(name for name, report in reports.items() if report.get("rejected"))
        click.echo(f"Cleaned {len(reports) - len(rejected)} of {len(reports)} workflows")
        for name in rejected:
            click.echo(f"  {name}: {reports[name]['rejected']}", err=True)
        if report_path:
            write_atomic(report_path, dump_json(reports))
        return EXIT_INVALID if rejected else EXIT_OK

    base = load_base(nodebase) if nodebase else None
    g = parse_graph_workflow(read_bytes(in_path))
    cleaned, report = clean(g, opts, base)
    if report_path:
        write_atomic(report_path, dump_json(report.to_obj()))
    if report.rejected:
        click.echo(f"Rejected: {report.rejected}", err=True)
        return EXIT_INVALID
    write_atomic(out_path, emit_graph_workflow(cleaned))
    click.echo(
        f"Removed {len(report.removed_nodes)} nodes, added {report.added_links} links, "
        f"spliced {report.spliced_links} links"
    )
    return EXIT_OK


@cli.command("validate")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--strict-types", is_flag=True, default=False, help="Fall back to slot types")
@exit_codes
def validate(in_path: str, nodebase: Optional[str], strict_types: bool) -> int:
    base = load_base(nodebase)
    report = validate_executable(load_workflow(in_path, base), base, strict_types=strict_types)
    click.echo(dump_json(report.to_obj()).decode("utf-8"))
    return EXIT_OK if report.valid else EXIT_INVALID


# ── refine / generate / bench ─────────────────────────────────────────────────


@cli.command("refine")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--desc", required=True, help="Workflow description")
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--k", type=click.IntRange(min=1), help="Candidates retrieved per incorrect node")
@exit_codes
def refine_command(
    in_path: str, desc: str, nodebase: Optional[str], out_path: str, k: Optional[int]
) -> int:
    base = load_base(nodebase)
    d = parse_diagram(read_bytes(in_path))
    outcome = refine(
        d,
        desc,
        base,
        llm_client(),
        k=setting("REFINE_K", k),
        retries=current_app.config["REFINE_RETRIES"],
        max_prompt_chars=current_app.config["REFINE_MAX_PROMPT_CHARS"],
    )
    write_atomic(out_path, emit_diagram(outcome.diagram))
    click.echo(dump_json(outcome.to_obj()).decode("utf-8"))
    if any(reason == LlmFailure.__name__ for _, reason in outcome.unresolved):
        return EXIT_TRANSPORT
    return EXIT_INVALID if outcome.unresolved else EXIT_OK


def _backend(name: str, corpus):
    if name == "nn":
        if not corpus:
            raise click.UsageError("the nn backend needs a few-shot corpus (--fewshot)")
        return NearestNeighborBackend(corpus, provider_from_config(current_app.config))
    return llm_client()


@cli.command("generate")
@config_option
@click.option("--desc", required=True, help="Workflow description")
@click.option("--backend", "backend_name", type=click.Choice(["llm", "nn"]), default="llm")
@click.option("--fewshot", type=click.Path(exists=True, dir_okay=False))
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--max-attempts", type=click.IntRange(min=1))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@exit_codes
def generate_command(
    desc: str,
    backend_name: str,
    fewshot: Optional[str],
    nodebase: Optional[str],
    max_attempts: Optional[int],
    out_path: str,
) -> int:
    base = load_base(nodebase)
    corpus = fewshot_corpus(fewshot)
    req = GenerationRequest(
        desc, tuple(select_examples(corpus)), setting("MAX_ATTEMPTS", max_attempts)
    )
    outcome = generate(req, _backend(backend_name, corpus), base)
    if isinstance(outcome, Failed):
        if is_transport_error(outcome.error):
            raise outcome.error
        click.echo(f"Generation failed: {type(outcome.error).__name__}: {outcome.error}", err=True)
        return EXIT_INVALID
    write_atomic(out_path, emit_diagram(outcome.diagram))
    click.echo(f"Wrote diagram with {len(outcome.diagram)} links after {outcome.attempts_used} attempt(s)")
    return EXIT_OK


@cli.command("bench")
@config_option
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--backend", "backend_name", type=click.Choice(["llm", "nn"]), default="llm")
@click.option("--fewshot", type=click.Path(exists=True, dir_okay=False))
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--judge", is_flag=True, default=False, help="Score PIA with the LLM judge")
@click.option("--live-server", is_flag=True, default=False, help="PA requires server acceptance")
@click.option("--self-correct", is_flag=True, default=False, help="Use the retry loop per record")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@exit_codes
def bench_command(
    dataset: str,
    backend_name: str,
    fewshot: Optional[str],
    nodebase: Optional[str],
    judge: bool,
    live_server: bool,
    self_correct: bool,
    out_path: str,
) -> int:
    base = load_base(nodebase)
    records, malformed = load_dataset(read_bytes(dataset))
    for error in malformed:
        click.echo(f"Skipped dataset {error}", err=True)

    corpus = fewshot_corpus(fewshot)
    report = evaluate(
        records,
        _backend(backend_name, corpus),
        base,
        judge=llm_client() if judge else None,
        server=ServerClient.from_config(current_app.config) if live_server else None,
        few_shot=select_examples(corpus),
        parallelism=current_app.config["BENCH_PARALLELISM"],
        self_correct=self_correct,
        max_attempts=current_app.config["MAX_ATTEMPTS"],
    )
    write_atomic(out_path, report_emit(report))

    pia = "n/a" if report.pia is None else f"{report.pia * 100:.1f}"
    click.echo(
        f"FV {report.fv * 100:.1f}  PA {report.pa * 100:.1f}  PIA {pia}  PND {report.pnd}"
        f"  ({report.total} records)"
    )
    return EXIT_OK


# ── curate ────────────────────────────────────────────────────────────────────


@cli.group("curate")
def curate_group() -> None:
    """Build benchmark datasets from scraped workflows."""


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = load_json(line)
            if not isinstance(obj, dict):
                raise CurationError(f"{path}:{line_no}: record must be an object")
            records.append(obj)
    return records


def dump_jsonl(records: Sequence[Dict[str, Any]]) -> bytes:
    return "".join(json.dumps(record, ensure_ascii=False) + "\n" for record in records).encode("utf-8")


@curate_group.command("describe")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@exit_codes
def curate_describe(in_path: str, out_path: str) -> int:
    """Summarise and categorise records carrying raw "information" text."""
    llm = llm_client()
    curated = []
    for i, record in enumerate(read_jsonl(in_path)):
        information = record.pop("information", None)
        if not isinstance(information, str) or not information.strip():
            click.echo(f"Record {i}: no information text, dropped", err=True)
            continue
        try:
            description = enhance_description(information, llm)
            if not description:
                click.echo(f"Record {i}: empty summary, dropped", err=True)
                continue
            record["description"] = description
            record["category_summary"] = summarize_category(description, llm)
            record["category"] = classify(description, llm).display_name
        except CurationError as e:
            click.echo(f"Record {i}: {e}, dropped", err=True)
            continue
        curated.append(record)

    write_atomic(out_path, dump_jsonl(curated))
    click.echo(f"Curated {len(curated)} records to {out_path}")
    return EXIT_OK


@curate_group.command("split")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--bench-size", type=click.IntRange(min=0), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--bench-out", type=click.Path(dir_okay=False), required=True)
@click.option("--train-out", type=click.Path(dir_okay=False), required=True)
@exit_codes
def curate_split(in_path: str, bench_size: int, seed: int, bench_out: str, train_out: str) -> int:
    """Stratified benchmark/training split by category."""
    records = read_jsonl(in_path)
    bench, train = partition(records, bench_size, seed, key=lambda record: record.get("category"))
    write_atomic(bench_out, dump_jsonl(bench))
    write_atomic(train_out, dump_jsonl(train))
    click.echo(f"Split {len(records)} records: {len(bench)} benchmark, {len(train)} training")
    return EXIT_OK


# ── nodebase ──────────────────────────────────────────────────────────────────


@cli.group("nodebase")
def nodebase_group() -> None:
    """Manage node database snapshots."""


@nodebase_group.command("ingest")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@exit_codes
def nodebase_ingest(in_path: str, out_path: str) -> int:
    base = ingest(read_bytes(in_path), provider_from_config(current_app.config))
    write_atomic(out_path, emit_snapshot(base))
    click.echo(f"Ingested {len(base)} nodes ({base.provider_id})")
    return EXIT_OK


@nodebase_group.command("merge")
@config_option
@click.option("--old", "old_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--new", "new_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@exit_codes
def nodebase_merge(old_path: str, new_path: str, out_path: str) -> int:
    write_atomic(out_path, merge_snapshots(read_bytes(old_path), read_bytes(new_path)))
    click.echo(f"Merged into {out_path}")
    return EXIT_OK


@nodebase_group.command("query")
@config_option
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--name", required=True, help="Node name to look up")
@click.option("--k", type=click.IntRange(min=1))
@exit_codes
def nodebase_query(nodebase: Optional[str], name: str, k: Optional[int]) -> int:
    base = load_base(nodebase)
    for candidate, score in top_k(base, name, setting("REFINE_K", k)):
        click.echo(f"{score:.6f}\t{candidate}")
    return EXIT_OK


@nodebase_group.command("sync")
@config_option
@click.option("--server-url", help="ComfyUI server base URL")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--merge-into", type=click.Path(exists=True, dir_okay=False))
@exit_codes
def nodebase_sync(server_url: Optional[str], out_path: str, merge_into: Optional[str]) -> int:
    url = setting("SERVER_URL", server_url)
    server = ServerClient(url, timeout=current_app.config["SERVER_TIMEOUT"])
    specs = specs_from_object_info(server.object_info())
    if merge_into:
        specs = merge_specs(parse_specs(read_bytes(merge_into)), specs)
    write_atomic(out_path, emit_specs(specs))
    log("nodebase sync", url, len(specs), "nodes")
    click.echo(f"Synced {len(specs)} nodes from {url}")
    return EXIT_OK


# ── submit / score ────────────────────────────────────────────────────────────


@cli.command("submit")
@config_option
@click.option(
    "--in", "in_paths", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True
)
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--server-url", help="ComfyUI server base URL")
@exit_codes
def submit_command(in_paths: Sequence[str], nodebase: Optional[str], server_url: Optional[str]) -> int:
    base = load_base(nodebase) if setting("NODEBASE_PATH", nodebase) else None
    graphs = [load_workflow(path, base) for path in in_paths]
    server = ServerClient(
        setting("SERVER_URL", server_url), timeout=current_app.config["SERVER_TIMEOUT"]
    )
    results = submit_many(graphs, server, base, current_app.config["SUBMIT_PARALLELISM"])

    code = EXIT_OK
    for path, result in zip(in_paths, results):
        if isinstance(result, Accepted):
            click.echo(f"{path}: accepted prompt_id={result.prompt_id}")
            continue
        if isinstance(result, Exception):
            click.echo(f"{path}: {type(result).__name__}: {result}", err=True)
            if is_transport_error(result):
                code = EXIT_TRANSPORT
                continue
        else:
            click.echo(f"{path}: rejected {result.message}", err=True)
        if code != EXIT_TRANSPORT:
            code = EXIT_INVALID
    return code


def format_numbers(values: Sequence[float]) -> str:
    return " ".join(f"{value:.10g}" for value in values)


def parse_rewards(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise click.BadParameter(f"not a comma-separated list of numbers: {text!r}") from e


@cli.command("score")
@config_option
@click.option("--diagram", "diagram_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--rewards", help='Comma-separated group rewards, e.g. "1,0,1,0,0"')
@exit_codes
def score(diagram_path: Optional[str], nodebase: Optional[str], rewards: Optional[str]) -> int:
    if (diagram_path is None) == (rewards is None):
        raise click.UsageError("give exactly one of --diagram or --rewards")
    if rewards is not None:
        try:
            group = GroupRewards(tuple(parse_rewards(rewards)))
        except ValueError as e:
            raise click.BadParameter(str(e), param_hint="--rewards") from e
        click.echo(format_numbers(advantages(group).advantages))
        return EXIT_OK

    base = load_base(nodebase)
    click.echo(format_numbers([reward(parse_diagram(read_bytes(diagram_path)), base.names)]))
    return EXIT_OK


@cli.command("api-format")
@config_option
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--nodebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@exit_codes
def api_format(in_path: str, nodebase: Optional[str], out_path: str) -> int:
    """Write the server prompt form of a workflow or diagram."""
    base = load_base(nodebase) if setting("NODEBASE_PATH", nodebase) else None
    write_atomic(out_path, to_api_format(load_workflow(in_path, base), base))
    click.echo(f"Wrote server prompt to {out_path}")
    return EXIT_OK


# ── Entry point ───────────────────────────────────────────────────────────────


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; returns the process exit code."""
    from app import InvalidConfig, create_app  # pylint: disable=import-outside-toplevel

    instance_path = os.environ.get(f"{ENV_PREFIX}_INSTANCE_PATH")
    try:
        app = create_app(
            os.environ.get("FLASK_CONFIG", "default"),
            os.path.abspath(instance_path) if instance_path else None,
        )
    except InvalidConfig as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE

    with app.app_context():
        try:
            rv = cli.main(
                args=list(argv) if argv is not None else None,
                prog_name=APP_NAME,
                standalone_mode=False,
            )
        except click.UsageError as e:
            e.show()
            return EXIT_USAGE
        except click.ClickException as e:
            e.show()
            return e.exit_code
        except click.Abort:
            click.echo("Aborted!", err=True)
            return EXIT_INVALID
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
