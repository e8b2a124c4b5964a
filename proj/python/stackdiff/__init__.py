"""Python bindings for the stackdiff core."""
try:
    from ._stackdiff import *  # noqa: F401,F403
    from ._stackdiff import Error, StubService, __doc__  # noqa: F401
except ImportError:  # in-tree build: the extension sits next to this package
    from _stackdiff import *  # noqa: F401,F403
    from _stackdiff import Error, StubService, __doc__  # noqa: F401
