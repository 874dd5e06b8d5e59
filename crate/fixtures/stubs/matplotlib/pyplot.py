_calls = []


def _record(name):
    def f(*args, **kwargs):
        _calls.append((name, len(args)))
    return f


figure = _record("figure")
plot = _record("plot")
xlabel = _record("xlabel")
ylabel = _record("ylabel")
title = _record("title")
legend = _record("legend")
close = _record("close")
show = _record("show")


def savefig(path, *args, **kwargs):
    with open(path, "w") as fh:
        fh.write("placeholder figure: %d calls\n" % len(_calls))
    _calls.clear()
