from hypothesis import given, strategies as st

from actiongate.pathmatch import PathContext, glob_match, normalize_target

CTX = PathContext(home="/home/u", workspace_root="/home/u/ws")


def test_relative_targets_resolve_under_workspace():
    assert normalize_target("./src/app.py", CTX) == "/home/u/ws/src/app.py"
    assert normalize_target("notes.md", CTX) == "/home/u/ws/notes.md"


def test_empty_target_is_workspace_root():
    assert normalize_target("", CTX) == "/home/u/ws"
    assert normalize_target(".", CTX) == "/home/u/ws"


def test_home_expansion():
    assert normalize_target("~", CTX) == "/home/u"
    assert normalize_target("~/docs/x", CTX) == "/home/u/docs/x"


def test_normalization_collapses_dots_and_case():
    assert normalize_target("./a/../b/./C.txt", CTX) == "/home/u/ws/b/c.txt"
    assert normalize_target("/Etc/Shadow", CTX) == "/etc/shadow"


def test_urls_pass_through_lowercased():
    assert normalize_target("HTTPS://Example.com/Path", CTX) == "https://example.com/path"


@given(st.text(alphabet="abcDEF/._-~", min_size=1, max_size=40))
def test_normalize_is_idempotent(raw):
    once = normalize_target(raw, CTX)
    assert normalize_target(once, CTX) == once


def test_single_star_stays_within_segment():
    assert glob_match("/var/*.log", "/var/app.log", CTX)
    assert not glob_match("/var/*.log", "/var/sub/app.log", CTX)


def test_double_star_spans_segments():
    assert glob_match("**/id_rsa*", "~/.ssh/id_rsa", CTX)
    assert glob_match("**/id_rsa*", "/anywhere/deep/id_rsa.pub", CTX)


def test_trailing_recursive_glob_covers_anchor_itself():
    assert glob_match("~/.ssh/**", "~/.ssh", CTX)
    assert glob_match("~/.ssh/**", "~/.ssh/keys/id_rsa", CTX)
    assert not glob_match("~/.ssh/**", "/home/u/.sshx", CTX)


def test_workspace_relative_pattern():
    assert glob_match("./**", "./src/deep/file.py", CTX)
    assert glob_match("./**", "src/deep/file.py", CTX)
    assert not glob_match("./**", "/etc/passwd", CTX)


def test_matching_is_case_insensitive():
    assert glob_match("**/SOUL.md", "./notes/soul.MD", CTX)
    assert glob_match("/etc/shadow", "/ETC/SHADOW", CTX)


def test_mid_pattern_recursion():
    assert glob_match("/opt/**/bin/tool", "/opt/a/b/bin/tool", CTX)
    assert glob_match("/opt/**/bin/tool", "/opt/bin/tool", CTX)
    assert not glob_match("/opt/**/bin/tool", "/opt/a/bin/other", CTX)
