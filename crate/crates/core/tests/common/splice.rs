//! Fixture module for splice round trips: nested classes, decorators and odd layouts.

pub const SPLICE_REPO: &str = r#"import functools


def plain(a):
    return a + 1


def documented(a, b=2):
    """Add things.

    More words.
    """
    total = a + b
    return total


def decorated_target(fn):
    @functools.wraps(fn)
    def wrapper(*args):
        return fn(*args)

    return wrapper


@functools.lru_cache(maxsize=None)
def cached(n):
    if n < 2:
        return n
    return cached(n - 1) + cached(n - 2)


@staticmethod
@functools.lru_cache()
def double_decorated(x):
    return x * 2


def multiline_signature(
    first,
    second=None,
    *rest,
    **extra,
):
    return (first, second, rest, extra)


def with_comment(x):  # trailing note
    # leading comment
    y = x * 2
    return y


async def coroutine(x):
    await other(x)
    return x


def nested_defs(x):
    def inner(y):
        return y + x

    return inner(1)


class Outer:
    """Outer class."""

    attr = 1

    def method(self):
        return self.attr

    @property
    def prop(self):
        """Property doc."""
        return self.attr * 2

    @classmethod
    def build(cls):
        return cls()

    class Inner:
        def deep(self, v):
            if v:
                return v
            return None

        class Innermost:
            def deeper(self):
                x = """keep
  this"""
                return x


def string_body():
    return """a
b
    c"""


def trailing_blank_lines(x):
    y = x

    return y



def loops(items):
    out = []
    for i in items:
        while i > 0:
            i -= 1
        out.append(i)
    else:
        out.append(None)
    return out


def try_body(x):
    try:
        return int(x)
    except ValueError:
        return None
    finally:
        pass


def last_in_file(x):
    return -x
"#;

pub const SPLICE_TARGETS: [&str; 20] = [
    "m.plain",
    "m.documented",
    "m.decorated_target",
    "m.cached",
    "m.double_decorated",
    "m.multiline_signature",
    "m.with_comment",
    "m.coroutine",
    "m.nested_defs",
    "m.Outer.method",
    "m.Outer.prop",
    "m.Outer.build",
    "m.Outer.Inner.deep",
    "m.Outer.Inner.Innermost.deeper",
    "m.string_body",
    "m.trailing_blank_lines",
    "m.loops",
    "m.try_body",
    "m.last_in_file",
    "m.decorated_target.wrapper",
];
