import inspect


def autodoc_skip_protected(app, what, name, obj, skip, options):
    """
    Document callables named like ``_helper_`` (leading and trailing single
    underscore, the package's convention for module-private helpers) when
    they carry a docstring. Everything else keeps autodoc's decision.
    """
    if not skip:
        return False

    include = (
        callable(obj) and
        not name.startswith("__") and
        name.startswith("_") and
        name.endswith("_") and
        inspect.getdoc(obj) is not None
    )

    return not include


def setup(app):
    app.connect("autodoc-skip-member", autodoc_skip_protected)
    return {"parallel_read_safe": True}
