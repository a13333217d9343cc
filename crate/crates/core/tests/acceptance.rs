//! Acceptance criteria, one line of output each. Runs without the libtest
//! harness so the lines always reach the log.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use capsule_core::analytics::{self, AttemptCounts, Rational};
use capsule_core::backend::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, MockBackend, MockScript};
use capsule_core::config::{PartialConfig, RunConfig};
use capsule_core::dataset::{write_problems, LoadOptions, Problem, SourceFormat, TestHarnessText};
use capsule_core::orchestrator::{AttemptRecord, Orchestrator, RunHeader, RunLog, RunLogWriter, SolveOutcome, SolveSettings};
use capsule_core::refine::{refine, ErrorCategory};
use capsule_core::sandbox::{prepare_workspace, CancelToken, ExecBackend, ExecSettings, ExecStatus, ExecutionResult, SubprocessBackend};
use capsule_core::sanitizer::{strip_example_calls, SanitizedCode};
use capsule_core::signature::{parse_assert, signature_from_shape};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

// Tolerances.
const INFLUENCE_TOL: f64 = 1e-9;
const FIT_PARAM_TOL: f64 = 1e-6;
const FIT_R2_TOL: f64 = 1e-9;
const FIT_SCALE_TOL: f64 = 1e-9;
const INFLUENCE_MAX_SECS: f64 = 1.0;
const TIMEOUT_FIXTURE_SECS: f64 = 2.0;
const TIMEOUT_MAX_DURATION_SECS: f64 = 3.0;
const RECURSION_MIN_RAW_BYTES: u64 = 100 * 1024;
const REFINE_BUDGET: usize = 2000;
const E2E_MAX_SECS: f64 = 60.0;
const CONSERVATION_LOGS: usize = 100;

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn python(script: &str, input: &Value) -> Result<Value, String> {
    let mut child = Command::new("python3")
        .args(["-c", script])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start python3: {e}"))?;
    child.stdin.take().unwrap().write_all(input.to_string().as_bytes()).map_err(|e| e.to_string())?;
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("oracle failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("oracle output: {e}"))
}

fn r(n: i128, d: i128) -> Rational {
    Rational::new(n, d)
}

// 1 -------------------------------------------------------------------------

fn influence_arithmetic() -> Outcome {
    let start = Instant::now();
    let values = analytics::parse_table("92.0,3.8,1.9,1.1,1.1,0.2").map_err(|e| e.to_string())?;
    let counts = analytics::from_table(&values, r(100, 1)).map_err(|e| e.to_string())?;
    let points = analytics::influence(&counts);
    let elapsed = start.elapsed().as_secs_f64();

    ensure(points.len() == 6, || format!("expected 6 points, got {}", points.len()))?;
    ensure(points[0].value == r(92, 100), || format!("I_0 = {:?}", points[0].value))?;
    ensure(points[1].value == r(475, 1000), || format!("I_1 = {:?}", points[1].value))?;
    // Survivors by hand: 100, 8.0, 4.2, 2.3, 1.2, 0.1.
    let hand = [92.0 / 100.0, 3.8 / 8.0, 1.9 / 4.2, 1.1 / 2.3, 1.1 / 1.2, 0.2 / 0.1];
    for (p, want) in points.iter().zip(hand) {
        let got = p.value_f64();
        ensure((got - want).abs() <= INFLUENCE_TOL, || format!("I_{} = {got}, want {want}", p.i))?;
    }
    let csv = analytics::influence_csv(&points);
    ensure(csv.lines().nth(1) == Some("0,92,100,0.920000"), || format!("csv row 0: {:?}", csv.lines().nth(1)))?;
    ensure(csv.lines().nth(2) == Some("1,3.8,8,0.475000"), || format!("csv row 1: {:?}", csv.lines().nth(2)))?;
    ensure(elapsed < INFLUENCE_MAX_SECS, || format!("took {elapsed:.3}s"))
}

// 2 -------------------------------------------------------------------------

fn decay_fit_recovery() -> Outcome {
    let pts: Vec<(f64, f64)> = (0..6).map(|x| (x as f64, 0.9 * (-0.8 * x as f64).exp())).collect();
    let fit = analytics::fit_xy(&pts).map_err(|e| e.to_string())?;
    ensure((fit.a - 0.9).abs() <= FIT_PARAM_TOL, || format!("a = {}", fit.a))?;
    ensure((fit.b - 0.8).abs() <= FIT_PARAM_TOL, || format!("b = {}", fit.b))?;
    ensure(fit.r_squared >= 1.0 - FIT_R2_TOL, || format!("r_squared = {}", fit.r_squared))?;
    ensure(fit.points_used == 6, || format!("points_used = {}", fit.points_used))?;
    let half: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, 0.5 * y)).collect();
    let fit2 = analytics::fit_xy(&half).map_err(|e| e.to_string())?;
    ensure((fit2.b - fit.b).abs() <= FIT_SCALE_TOL, || format!("b moved to {}", fit2.b))?;
    ensure((fit2.a - 0.5 * fit.a).abs() <= FIT_SCALE_TOL, || format!("a scaled to {}", fit2.a))
}

// Shared problem fixtures ---------------------------------------------------

fn response(code: &str) -> String {
    format!("### Reasoning\nStraightforward.\n\n### Requirements\nNone\n\n### Code\n```python\n{code}\n```\n")
}

fn square_problem(id: &str) -> Problem {
    Problem {
        id: id.into(),
        description: "Write a function square(x) that returns x squared.".into(),
        tests: vec!["assert square(4) == 16".into(), "assert square(-3) == 9".into()],
        entry_point: None,
        source_format: SourceFormat::Custom,
    }
}

fn wrong_square(tag: usize) -> String {
    response(&format!("def square(x):\n    return x + {tag}"))
}

fn right_square() -> String {
    response("def square(x):\n    return x * x\n\nprint(square(4))")
}

fn subprocess_orchestrator(backend: Arc<dyn CompletionBackend>, work: &Path) -> Orchestrator {
    let settings = SolveSettings { work_dir: work.to_path_buf(), timeout: Duration::from_secs(10), ..SolveSettings::default() };
    Orchestrator::new(backend, Arc::new(SubprocessBackend::new(ExecSettings::default())), settings)
}

/// Records every request it forwards.
struct Capture {
    inner: MockBackend,
    seen: Mutex<Vec<CompletionRequest>>,
}

impl CompletionBackend for Capture {
    fn name(&self) -> &'static str {
        "capture"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.seen.lock().unwrap().push(request.clone());
        self.inner.complete(request)
    }
}

fn capture(seq: Vec<String>) -> Arc<Capture> {
    Arc::new(Capture {
        inner: MockBackend::new(MockScript { problems: HashMap::new(), default: seq }),
        seen: Mutex::new(Vec::new()),
    })
}

// 3 -------------------------------------------------------------------------

fn attempt_cap() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    for k in 0..=5usize {
        let mut seq: Vec<String> = (0..k).map(wrong_square).collect();
        seq.push(right_square());
        let backend = capture(seq);
        let out = subprocess_orchestrator(backend.clone(), work.path()).solve(&square_problem("cap"));
        ensure(out.solved, || format!("k={k}: not solved ({:?})", out.setup_error))?;
        ensure(out.llm_calls == k + 1, || format!("k={k}: llm_calls = {}", out.llm_calls))?;
        ensure(backend.seen.lock().unwrap().len() == k + 1, || format!("k={k}: backend saw extra calls"))?;
    }
    // The mock keeps returning its last (failing) entry, so a seventh call
    // would be served if the loop asked for one.
    let backend = capture((0..6).map(wrong_square).collect());
    let out = subprocess_orchestrator(backend.clone(), work.path()).solve(&square_problem("cap"));
    ensure(!out.solved, || "6 failures: solved".into())?;
    ensure(out.llm_calls == 6 && out.attempts.len() == 6, || format!("6 failures: llm_calls = {}", out.llm_calls))?;
    let seen = backend.seen.lock().unwrap().len();
    ensure(seen == 6, || format!("6 failures: backend saw {seen} calls"))
}

// 4 -------------------------------------------------------------------------

fn history_cap() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut seq: Vec<String> = (0..5).map(wrong_square).collect();
    seq.push(right_square());
    let backend = capture(seq);
    let out = subprocess_orchestrator(backend.clone(), work.path()).solve(&square_problem("hist"));
    ensure(out.llm_calls == 6 && out.solved, || format!("expected 5 failures then a pass, got {} calls", out.llm_calls))?;
    let prompts: Vec<String> = backend.seen.lock().unwrap().iter().map(|r| r.user_text.clone()).collect();
    let digests: Vec<&str> = out.attempts.iter().map(|a| a.code_digest.as_str()).collect();
    let mut distinct = digests.clone();
    distinct.sort();
    distinct.dedup();
    ensure(distinct.len() == digests.len(), || "attempt codes share a digest".into())?;
    for i in 1..prompts.len() {
        let p = &prompts[i];
        ensure(p.contains(digests[i - 1]), || format!("fix prompt {i} lacks digest of attempt {}", i - 1))?;
        for (j, d) in digests.iter().enumerate().take(i - 1) {
            ensure(!p.contains(d), || format!("fix prompt {i} mentions digest of attempt {j}"))?;
        }
        // Earlier code bodies must not leak either.
        for j in 0..i - 1 {
            let marker = format!("return x + {j}\n");
            ensure(!p.contains(&marker), || format!("fix prompt {i} contains code of attempt {j}"))?;
        }
    }
    Ok(())
}

// 5 -------------------------------------------------------------------------

/// (assert, signature line, example call line). The first-line name is the
/// callee of the call.
const SIGNATURE_CORPUS: &[(&str, &str, &str)] = &[
    ("assert foo(4) == 16", "foo(arg_int: int)", "foo(4)"),
    ("assert get_answer() == 42", "get_answer()", "get_answer()"),
    ("assert add(2, 3) == 5", "add(arg_int1: int, arg_int2: int)", "add(2, 3)"),
    ("assert flatten([[1, 2], [3, [4, 5]]]) == [1, 2, 3, 4, 5]", "flatten(arg_list: list)", "flatten([[1, 2], [3, [4, 5]]])"),
    ("assert split_words(\"a,b\", \",\") == [\"a\", \"b\"]", "split_words(arg_str1: str, arg_str2: str)", "split_words(\"a,b\", \",\")"),
    ("assert math.isclose(area(2.0), 12.566, rel_tol=1e-3)", "area(arg_float: float)", "area(2.0)"),
    ("assert set(common([1, 2], [2, 3])) == {2}", "common(arg_list1: list, arg_list2: list)", "common([1, 2], [2, 3])"),
    ("assert is_palindrome(\"racecar\")", "is_palindrome(arg_str: str)", "is_palindrome(\"racecar\")"),
    ("assert not is_prime(9)", "is_prime(arg_int: int)", "is_prime(9)"),
    ("assert (count_items((3, 5))) == 2", "count_items(arg_tuple: tuple)", "count_items((3, 5))"),
    ("assert count_keys({\"x\": 5, \"y\": 6}) == 2", "count_keys(arg_dict: dict)", "count_keys({\"x\": 5, \"y\": 6})"),
    ("assert solve(n=10, flag=True) == 55", "solve(n: int, flag: bool)", "solve(n=10, flag=True)"),
    ("assert find(None, -1.5) == 0", "find(arg_none: None, arg_float: float)", "find(None, -1.5)"),
    ("assert remove_dups([1, 1, 2]) == [1, 2]  # keep order", "remove_dups(arg_list: list)", "remove_dups([1, 1, 2])"),
    ("assert count_parens(\"a(b)c(\") == 3", "count_parens(arg_str: str)", "count_parens(\"a(b)c(\")"),
    ("assert sorted(unique_chars(\"hello\")) == [\"e\", \"h\", \"l\", \"o\"]", "unique_chars(arg_str: str)", "unique_chars(\"hello\")"),
    ("assert merge({1, 2}, {3}) == {1, 2, 3}", "merge(arg_set1: set, arg_set2: set)", "merge({1, 2}, {3})"),
    ("assert product(2, 3.5, \"x\") != 0", "product(arg_int: int, arg_float: float, arg_str: str)", "product(2, 3.5, \"x\")"),
    ("assert f(x) == 1", "f(arg_other: Any)", "f(x)"),
    ("assert text_stats('it''s', sep=',') == {'words': 1}", "text_stats(arg_str: str, sep: str)", "text_stats('it''s', sep=',')"),
];

const AST_CALL_ORACLE: &str = r#"
import ast, json, sys
WRAPPERS = {"set", "frozenset", "sorted", "list", "tuple", "round", "abs", "len", "str", "int",
            "float", "bool", "sum", "isclose", "math.isclose", "math.fabs"}
def dotted(f):
    if isinstance(f, ast.Name):
        return f.id
    if isinstance(f, ast.Attribute):
        base = dotted(f.value)
        return base and base + "." + f.attr
    return None
out = []
for src in json.load(sys.stdin):
    test = ast.parse(src).body[0].test
    rhs = None
    if isinstance(test, ast.Compare):
        rhs = ast.get_source_segment(src, test.comparators[0])
        test = test.left
    if isinstance(test, ast.UnaryOp) and isinstance(test.op, ast.Not):
        test = test.operand
    call = test
    while dotted(call.func) in WRAPPERS and call.args and isinstance(call.args[0], ast.Call):
        call = call.args[0]
    args = [ast.get_source_segment(src, a) for a in call.args]
    args += [k.arg + "=" + ast.get_source_segment(src, k.value) for k in call.keywords]
    out.append({"name": dotted(call.func), "args": args, "rhs": rhs})
print(json.dumps(out))
"#;

fn signature_fixtures() -> Outcome {
    ensure(SIGNATURE_CORPUS.len() >= 15, || "corpus too small".into())?;
    let sources: Vec<&str> = SIGNATURE_CORPUS.iter().map(|c| c.0).collect();
    let oracle = python(AST_CALL_ORACLE, &json!(sources))?;
    for (k, (src, sig, call)) in SIGNATURE_CORPUS.iter().enumerate() {
        let shape = parse_assert(src).map_err(|e| format!("{src}: {e}"))?;
        let hint = signature_from_shape(&shape);
        let name = sig.split('(').next().unwrap();
        let expected = format!(
            "### Required function name for your reference '{name}()'\n### Function signature for your reference - {sig}\n### An example function call from private test cases - {call}"
        );
        ensure(hint.rendered_hint == expected, || format!("{src}:\n got {:?}\nwant {expected:?}", hint.rendered_hint))?;

        let o = &oracle[k];
        ensure(o["name"] == json!(shape.function_name), || format!("{src}: oracle name {}", o["name"]))?;
        let ours: Vec<&str> = shape.args.iter().map(|a| a.literal_text.as_str()).collect();
        ensure(o["args"] == json!(ours), || format!("{src}: oracle args {} vs {ours:?}", o["args"]))?;
        if let Some(rhs) = o["rhs"].as_str() {
            ensure(!hint.rendered_hint.contains(rhs), || format!("{src}: hint contains right-hand side {rhs:?}"))?;
        }
    }
    // The verbatim three-line block for the canonical example.
    let hint = signature_from_shape(&parse_assert("assert foo(4) == 16").unwrap());
    ensure(
        hint.rendered_hint
            == "### Required function name for your reference 'foo()'\n### Function signature for your reference - foo(arg_int: int)\n### An example function call from private test cases - foo(4)",
        || "canonical hint mismatch".into(),
    )
}

// 6 -------------------------------------------------------------------------

const SANITIZER_CORPUS: &[&str] = &[
    "def foo(x):\n    return x * x\nfoo(4)\n",
    "def foo(x):\n    return x * x\n\nprint(foo(4))\nprint(foo(5), 'ok')\n",
    "import math\n\ndef area(r):\n    return math.pi * r ** 2\n\nif __name__ == \"__main__\":\n    area(2)\n    print(area(3))\n",
    "def a():\n    return 1\n\ndef b():\n    return a() + 1\n\na(); b()\n",
    "class Stack:\n    def __init__(self):\n        self.items = []\n\n    def push(self, x):\n        self.items.append(x)\n\nStack()\n",
    "def f(n):\n    \"\"\"Example:\n    f(3)\n    \"\"\"\n    return n\n\nf(\n    3,\n)\n",
    "import functools\n\n@functools.lru_cache(maxsize=None)\ndef fib(n):\n    return n if n < 2 else fib(n - 1) + fib(n - 2)\n\nfib(10)\nprint(fib(20))\n",
    "def g(s):\n    # g('ignored')\n    return s[::-1]\n\nTABLE = {'k': 1}\ng('abc')  # demo\n",
    "def h(x):\n    if x:\n        return h(x - 1)\n    return 0\n\nif __name__ == '__main__':\n    import sys\n    h(int(sys.argv[1]) if len(sys.argv) > 1 else 3)\nelse:\n    pass\n",
    "async def main():\n    return 1\n\ndef helper(x):\n    return x\n\nhelper(main)\nprint(helper(2))\n",
];

/// For each (before, after) pair: top-level calls into fixture code when
/// executed as `__main__`, and the source of every top-level definition.
const SANITIZER_ORACLE: &str = r#"
import ast, json, sys, io, contextlib
def run(src):
    calls = []
    def prof(frame, event, arg):
        if event == "call" and frame.f_code.co_filename == "<fixture>" and frame.f_code.co_flags & 1:
            caller = frame.f_back
            if caller is not None and caller.f_code.co_filename == "<fixture>" and caller.f_code.co_name == "<module>":
                calls.append(frame.f_code.co_name)
    code = compile(src, "<fixture>", "exec")
    sys.setprofile(prof)
    try:
        with contextlib.redirect_stdout(io.StringIO()):
            exec(code, {"__name__": "__main__"})
    finally:
        sys.setprofile(None)
    return calls
def defs(src):
    tree = ast.parse(src)
    return {n.name: ast.get_source_segment(src, n) for n in tree.body
            if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef))}
out = []
for before, after in json.load(sys.stdin):
    out.append({"calls_before": run(before), "calls_after": run(after),
                "defs_before": defs(before), "defs_after": defs(after)})
print(json.dumps(out))
"#;

fn sanitizer_safety() -> Outcome {
    let pairs: Vec<(String, SanitizedCode)> = SANITIZER_CORPUS.iter().map(|c| (c.to_string(), strip_example_calls(c))).collect();
    for (before, s) in &pairs {
        ensure(s.warning.is_none(), || format!("scanner gave up on {before:?}"))?;
        let again = strip_example_calls(&s.code);
        ensure(again.code == s.code && again.removed.is_empty(), || format!("not idempotent on {before:?}"))?;
    }
    let input: Vec<(&str, &str)> = pairs.iter().map(|(b, s)| (b.as_str(), s.code.as_str())).collect();
    let oracle = python(SANITIZER_ORACLE, &json!(input))?;
    for (k, (before, _)) in pairs.iter().enumerate() {
        let o = &oracle[k];
        let before_calls = o["calls_before"].as_array().map(Vec::len).unwrap_or(0);
        ensure(before_calls > 0, || format!("fixture {k} makes no example call before stripping"))?;
        ensure(o["calls_after"] == json!([]), || format!("fixture {k} still calls {} after stripping", o["calls_after"]))?;
        ensure(o["defs_before"] == o["defs_after"], || format!("fixture {k} definitions changed:\n{before}"))?;
        ensure(o["defs_before"].as_object().is_some_and(|m| !m.is_empty()), || format!("fixture {k} has no definitions"))?;
    }
    Ok(())
}

// 7 and 8 -------------------------------------------------------------------

fn run_fixture(code: &str, tests: &str, timeout: Duration) -> Result<ExecutionResult, String> {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ws = prepare_workspace(
        base.path(),
        &SanitizedCode { code: code.into(), ..Default::default() },
        &TestHarnessText { body: tests.into() },
        &[],
        "fixture",
        0,
    )
    .map_err(|e| e.to_string())?;
    SubprocessBackend::new(ExecSettings::default()).execute(&ws, timeout).map_err(|e| e.to_string())
}

fn error_refinement() -> Outcome {
    let code = "import sys\nsys.setrecursionlimit(8000)\n\ndef ping_across_the_mutual_recursion(depth_counter):\n    return pong_across_the_mutual_recursion(depth_counter + 1)\n\ndef pong_across_the_mutual_recursion(depth_counter):\n    return ping_across_the_mutual_recursion(depth_counter + 1)\n";
    let res = run_fixture(code, "assert ping_across_the_mutual_recursion(0) == 1", Duration::from_secs(20))?;
    ensure(res.status == ExecStatus::Failed, || format!("recursion fixture status {}", res.status))?;
    ensure(res.stderr_bytes > RECURSION_MIN_RAW_BYTES, || format!("raw traceback only {} bytes", res.stderr_bytes))?;
    let refined = refine(&res, REFINE_BUDGET);
    let text = refined.render();
    ensure(refined.category == ErrorCategory::Recursion, || format!("category {}", refined.category))?;
    ensure(refined.char_len() <= REFINE_BUDGET, || format!("refined length {}", refined.char_len()))?;
    ensure(text.contains("RecursionError"), || "exception name missing".into())?;
    ensure(
        text.contains("[Previous 2 frames repeated ") && text.contains(" more times]"),
        || format!("no repeat count in:\n{text}"),
    )?;

    let res = run_fixture("def square(x):\n    return x + 1", "assert square(4) == 16", Duration::from_secs(10))?;
    let refined = refine(&res, REFINE_BUDGET);
    ensure(refined.category == ErrorCategory::Assertion, || format!("category {}", refined.category))?;
    ensure(
        refined.guidance == "Your generated solution failed a test case. Please improve the logic of your solution.",
        || format!("guidance {:?}", refined.guidance),
    )?;
    ensure(refined.filtered_traceback.contains("File \"main.py\""), || "traceback path not relative".into())
}

fn executor_timing() -> Outcome {
    let res = run_fixture("def spin():\n    while True:\n        pass", "spin()", Duration::from_secs_f64(TIMEOUT_FIXTURE_SECS))?;
    ensure(res.status == ExecStatus::Timeout, || format!("status {}", res.status))?;
    ensure(res.duration_secs <= TIMEOUT_MAX_DURATION_SECS, || format!("duration {:.3}s", res.duration_secs))?;
    let res = run_fixture("def square(x):\n    return x * x", "assert square(4) == 16", Duration::from_secs(10))?;
    ensure(res.status == ExecStatus::Passed && res.exit_code == 0, || format!("status {} exit {}", res.status, res.exit_code))
}

// 9 -------------------------------------------------------------------------

fn e2e_problems() -> Vec<(Problem, Vec<String>)> {
    let p = |id: &str, desc: &str, tests: &[&str]| Problem {
        id: id.into(),
        description: desc.into(),
        tests: tests.iter().map(|t| t.to_string()).collect(),
        entry_point: None,
        source_format: SourceFormat::Custom,
    };
    vec![
        (p("toy/0", "Return x squared.", &["assert square(4) == 16"]), vec![right_square()]),
        (p("toy/1", "Add two numbers.", &["assert add(2, 3) == 5"]), vec![response("def add(a, b):\n    return a - b"), response("def add(a, b):\n    return a + b")]),
        (p("toy/2", "Reverse a string.", &["assert rev(\"abc\") == \"cba\""]), vec![response("def rev(s):\n    return s[::-1]\nrev('x')")]),
        (p("toy/3", "Maximum of a list.", &["assert biggest([3, 9, 2]) == 9"]), vec!["I think you should use max.".into(), response("def biggest(xs):\n    return max(xs)")]),
        (p("toy/4", "Count vowels.", &["assert vowels(\"banana\") == 3"]), vec![response("def vowels(s)\n    return 0"), response("def vowels(s):\n    return sum(c in 'aeiou' for c in s)")]),
        (p("toy/5", "Factorial.", &["assert fact(5) == 120"]), vec![response("def fact(n):\n    return n * fact(n - 1)"), response("def fact(n):\n    return 1 if n <= 1 else n * fact(n - 1)")]),
        (p("toy/6", "First element.", &["assert first([7, 8]) == 7"]), vec![response("def first(xs):\n    return xs[5]"), response("def first(xs):\n    return xs[1]"), response("def first(xs):\n    return xs[0]")]),
        (p("toy/7", "Never solvable.", &["assert impossible() == 1"]), (0..6).map(|i| response(&format!("def impossible():\n    return {}", i + 2))).collect()),
        (p("toy/8", "Is even.", &["assert is_even(4)", "assert not is_even(3)"]), vec![response("def is_even(n):\n    return undefined_name")]),
        (p("toy/9", "Sum of digits.", &["assert digit_sum(123) == 6"]), vec![response("def digit_sum(n):\n    return sum(int(d) for d in str(n))\n\nif __name__ == '__main__':\n    print(digit_sum(99))")]),
    ]
}

fn normalized(path: &Path) -> Result<(RunConfig, Vec<SolveOutcome>), String> {
    let log = RunLog::read(path).map_err(|e| e.to_string())?;
    Ok((log.header.config, log.outcomes.iter().map(SolveOutcome::without_timing).collect()))
}

fn run_config(dir: &Path, dataset: &Path, script: &Path, output: &str, workers: usize) -> Result<RunConfig, String> {
    let mut p = PartialConfig::default();
    let set = |p: &mut PartialConfig, k: &str, v: &str| p.set(k, v).map_err(|e| e.to_string());
    set(&mut p, "dataset_path", dataset.to_str().unwrap())?;
    set(&mut p, "format", "custom")?;
    set(&mut p, "backend", "mock")?;
    set(&mut p, "mock_script", script.to_str().unwrap())?;
    set(&mut p, "exec_backend", "subprocess")?;
    set(&mut p, "timeout_secs", "10")?;
    set(&mut p, "workers", &workers.to_string())?;
    set(&mut p, "output_path", dir.join(output).to_str().unwrap())?;
    set(&mut p, "work_dir", dir.join("work").to_str().unwrap())?;
    p.resolve().map_err(|e| e.to_string())
}

fn execute_run(config: &RunConfig) -> Result<Vec<SolveOutcome>, String> {
    let problems = capsule_core::dataset::load_problems(config.dataset_path.as_ref().unwrap(), config.format).map_err(|e| e.to_string())?;
    let orch = Orchestrator::from_config(config, CancelToken::default()).map_err(|e| e.to_string())?;
    let mut w = RunLogWriter::create(&config.output_path, &RunHeader::new(config.clone())).map_err(|e| e.to_string())?;
    Ok(orch.run_suite(&problems, config.workers, |o| w.append(o).expect("log append")))
}

fn end_to_end_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = e2e_problems();
    let dataset = dir.path().join("toy.jsonl");
    let problems: Vec<Problem> = fixtures.iter().map(|f| f.0.clone()).collect();
    write_problems(&dataset, &problems, LoadOptions::default()).map_err(|e| e.to_string())?;
    let script = MockScript {
        problems: fixtures.iter().map(|(p, s)| (p.id.clone(), s.clone())).collect(),
        default: vec![],
    };
    let script_path = dir.path().join("script.json");
    std::fs::write(&script_path, serde_json::to_string(&script).unwrap()).map_err(|e| e.to_string())?;

    let mut a = run_config(dir.path(), &dataset, &script_path, "a.jsonl", 1)?;
    a.record_transcript = Some(dir.path().join("transcript.jsonl"));
    let out_a = execute_run(&a)?;
    let b = run_config(dir.path(), &dataset, &script_path, "a.jsonl", 1)?;
    let lines_a = std::fs::read_to_string(&a.output_path).map_err(|e| e.to_string())?;
    let (_, norm_a) = normalized(&a.output_path)?;
    execute_run(&b)?;
    let (_, norm_b) = normalized(&b.output_path)?;
    let c = run_config(dir.path(), &dataset, &script_path, "c.jsonl", 4)?;
    execute_run(&c)?;
    let (_, norm_c) = normalized(&c.output_path)?;
    let mut d = run_config(dir.path(), &dataset, &script_path, "d.jsonl", 4)?;
    d.backend = capsule_core::backend::BackendKind::Replay;
    d.replay_transcript = a.record_transcript.clone();
    let out_d = execute_run(&d)?;
    let (_, norm_d) = normalized(&d.output_path)?;
    let elapsed = start.elapsed().as_secs_f64();

    ensure(out_a.len() == 10 && lines_a.lines().count() == 11, || format!("log has {} lines", lines_a.lines().count()))?;
    ensure(out_a.iter().all(|o| o.setup_error.is_none()), || "setup errors in mock run".into())?;
    let solved = out_a.iter().filter(|o| o.solved).count();
    ensure(solved == 8, || {
        let detail: Vec<String> = out_a.iter().map(|o| format!("{}={}/{}", o.problem_id, o.solved, o.llm_calls)).collect();
        format!("solved {solved}/10, expected 8: {}", detail.join(" "))
    })?;
    let by_id: BTreeMap<&str, usize> = out_a.iter().map(|o| (o.problem_id.as_str(), o.llm_calls)).collect();
    let want_calls = [1, 2, 1, 2, 2, 2, 3, 6, 6, 1];
    for (k, want) in want_calls.iter().enumerate() {
        let id = format!("toy/{k}");
        ensure(by_id.get(id.as_str()) == Some(want), || format!("{id}: llm_calls {:?}, want {want}", by_id.get(id.as_str())))?;
    }
    ensure(norm_a == norm_b, || "two identical runs differ".into())?;
    ensure(norm_a == norm_c, || "workers=1 and workers=4 differ".into())?;
    ensure(norm_a == norm_d, || "replay differs from the recorded run".into())?;
    ensure(out_d.iter().all(|o| o.setup_error.is_none()), || "replay hit setup errors".into())?;
    ensure(elapsed < E2E_MAX_SECS, || format!("took {elapsed:.1}s"))
}

// 10 ------------------------------------------------------------------------

fn synthetic_outcome(id: usize, solved_at: Option<usize>, calls: usize) -> SolveOutcome {
    let attempts = (0..calls)
        .map(|i| AttemptRecord {
            index: i,
            prompt_tokens: 10,
            completion_tokens: 5,
            code_digest: format!("{i:016x}"),
            requirements: vec![],
            execution: ExecutionResult {
                status: if Some(i) == solved_at { ExecStatus::Passed } else { ExecStatus::Failed },
                exit_code: if Some(i) == solved_at { 0 } else { 1 },
                stdout: String::new(),
                stderr: String::new(),
                duration_secs: 0.0,
                stdout_bytes: 0,
                stderr_bytes: 0,
                timeout_secs: 10.0,
            },
            refined: None,
        })
        .collect();
    SolveOutcome {
        problem_id: format!("syn/{id}"),
        solved: solved_at.is_some(),
        attempts,
        llm_calls: calls,
        wall_time: 0.0,
        final_code: None,
        setup_error: None,
    }
}

fn conservation_suite() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut violations = Vec::new();
    for log_no in 0..CONSERVATION_LOGS {
        let n = rng.random_range(1..=200usize);
        let mut solved_at = Vec::with_capacity(n);
        let outcomes: Vec<SolveOutcome> = (0..n)
            .map(|k| {
                let roll = rng.random_range(0..8usize);
                let at = (roll < 6).then_some(roll);
                let calls = match at {
                    Some(i) => i + 1,
                    None => rng.random_range(0..=6usize),
                };
                solved_at.push(at);
                synthetic_outcome(k, at, calls)
            })
            .collect();
        let counts: AttemptCounts = analytics::tally(&outcomes, 5);
        let points = analytics::influence(&counts);
        // Independent counts straight from the generated labels.
        let direct_s: Vec<usize> = (0..6).map(|i| solved_at.iter().filter(|a| **a == Some(i)).count()).collect();
        let direct_unsolved = solved_at.iter().filter(|a| a.is_none()).count();
        let survivors = |i: usize| solved_at.iter().filter(|a| a.is_none_or(|x| x >= i)).count();
        let int = |x: usize| Rational::from_integer(x as i128);

        if counts.n != counts.unsolved + counts.solved() || counts.n != int(n) {
            violations.push(format!("log {log_no}: sum S_i + unsolved != N"));
        }
        if counts.s != direct_s.iter().map(|x| int(*x)).collect::<Vec<_>>() || counts.unsolved != int(direct_unsolved) {
            violations.push(format!("log {log_no}: tally disagrees with direct count"));
        }
        let mut expected_i = 0;
        for p in &points {
            while survivors(expected_i) == 0 {
                expected_i += 1;
            }
            if p.i != expected_i || p.n_i != int(survivors(p.i)) {
                violations.push(format!("log {log_no}: N_{} wrong", p.i));
            }
            if p.value < Rational::from_integer(0) || p.value > Rational::from_integer(1) {
                violations.push(format!("log {log_no}: I_{} out of range", p.i));
            }
            expected_i += 1;
        }
        for w in points.windows(2) {
            if w[1].i == w[0].i + 1 && w[1].n_i != w[0].n_i - w[0].s_i {
                violations.push(format!("log {log_no}: recurrence broken at {}", w[0].i));
            }
        }
        let emitted = (0..6).filter(|&i| survivors(i) > 0).count();
        if points.len() != emitted {
            violations.push(format!("log {log_no}: {} points, expected {emitted}", points.len()));
        }
    }
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("influence arithmetic", influence_arithmetic),
        ("decay-fit recovery", decay_fit_recovery),
        ("attempt cap", attempt_cap),
        ("history cap", history_cap),
        ("signature fixtures", signature_fixtures),
        ("sanitizer safety", sanitizer_safety),
        ("error refinement", error_refinement),
        ("executor timing", executor_timing),
        ("end-to-end determinism", end_to_end_determinism),
        ("conservation suite", conservation_suite),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("criterion {:>2} PASS  {name} ({secs:.2}s)", n + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.2}s): {e}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

