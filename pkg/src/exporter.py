# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""exporter.py: classes for exporting run artifacts"""

import abc
import csv
import json
import logging
import os
import typing as t

import src.reproducibility as reproducibility
from src.errors import WriteFailure


class Exporter(abc.ABC):
    def __init__(self, source: object):
        """
        Args:
          source: object instance to be exported
        """
        self.source = source

    @abc.abstractmethod
    def export(self):
        """
        Exports the source object to an implementation-specific format.
        """


def _prepare_(out_filename: str):
    out_dir = os.path.dirname(out_filename)
    if out_dir != "":
        os.makedirs(out_dir, exist_ok=True)


def generate(out_filename: str, entries: t.Iterable[t.Sequence[t.Any]],
             header: t.Optional[t.Sequence[str]] = None, delimiter: str = ","):
    """
    Write delimited rows, preceded by a header row if given.

    Raises:
      WriteFailure: the file could not be written.
    """
    try:
        _prepare_(out_filename)
        with open(out_filename, 'w', newline='', encoding="utf-8") as f:
            writer = csv.writer(f, delimiter=delimiter, lineterminator='\n')
            if header is not None:
                writer.writerow(header)
            for e in entries:
                writer.writerow(["" if v is None else v for v in e])
    except OSError as e:
        logging.error("Could not write %s: %s", out_filename, e)
        raise WriteFailure("Could not write {}: {}".format(out_filename, e)) from e


def write_json(out_filename: str, obj: t.Any):
    try:
        _prepare_(out_filename)
        with open(out_filename, 'w', encoding="utf-8") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
    except (OSError, TypeError) as e:
        logging.error("Could not write %s: %s", out_filename, e)
        raise WriteFailure("Could not write {}: {}".format(out_filename, e)) from e


class LossLogCsvExporter(Exporter):
    """
    Writes per-epoch losses, one row per epoch; the columns are the fields of
    the entries' named tuple type.
    """

    def export(self, out_filename: str = "loss_log.csv"):
        entries = list(self.source)
        header = entries[0]._fields if entries else ("epoch",)
        generate(out_filename, entries, header)


class PredictionCsvExporter(Exporter):
    """Writes a prediction dump with a header row."""

    HEADER = ("image_id", "question", "gold_answer", "predicted_answer", "correct")

    def export(self, out_filename: str = "predictions.csv"):
        generate(out_filename, ((r.image_id, r.question, r.gold_answer, r.predicted_answer,
                                 int(r.correct)) for r in self.source), self.HEADER)
        logging.info("Wrote %s predictions to '%s'.", len(self.source), out_filename)


class MetricsJsonExporter(Exporter):
    """Writes a metrics report, or a mapping of them, as JSON."""

    def export(self, out_filename: str = "metrics.json"):
        source = self.source
        if hasattr(source, "to_dict"):
            source = source.to_dict()
        else:
            source = {k: v.to_dict() if hasattr(v, "to_dict") else v for k, v in source.items()}
        write_json(out_filename, source)


class MetricsTableExporter(Exporter):
    """
    Renders labelled metrics reports as an aligned text table with open,
    closed and overall accuracy columns, in percent.

    Args:
      rows: (label, report) pairs, one table row each.
      title: label of the first column.
    """

    COLUMNS = ("Open", "Closed", "Overall")

    def __init__(self, rows: t.Sequence[t.Tuple[str, object]], title: str = "Model"):
        super().__init__(list(rows))
        self.title = title

    @staticmethod
    def _cell_(value: t.Optional[float]) -> str:
        return "n/a" if value is None else "{:.2f}".format(100 * value)

    def export(self) -> str:
        table = [(self.title,) + self.COLUMNS]
        for label, report in self.source:
            table.append((label, self._cell_(report.open_accuracy),
                          self._cell_(report.closed_accuracy),
                          self._cell_(report.overall_accuracy)))
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
        lines = []
        for r in table:
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"


class HistogramTsvExporter(Exporter):
    """Writes question-type counts of one or more splits as split, type, count rows."""

    def export(self, out_filename: str = "question_types.tsv"):
        rows = [(name, qtype, count) for name, hist in self.source.items()
                for qtype, count in hist.items()]
        generate(out_filename, rows, ("split", "question_type", "count"), delimiter='\t')


class HistogramPlotExporter(Exporter):
    """
    Draws question-type counts of one or more splits as horizontal bar
    charts, one panel per split.
    """

    def export(self, out_filename: str = "question_types.png") -> bool:
        """
        Returns:
          False if no plotting library is available and nothing was drawn.
        """
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            logging.info("matplotlib missing. Skipping plot, data only.")
            return False

        panels = list(self.source.items())
        fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3), squeeze=False)
        for ax, (name, hist) in zip(axes[0], panels):
            labels = [k for k, _ in hist.items()][::-1]
            counts = [v for _, v in hist.items()][::-1]
            ax.barh(labels, counts)
            ax.set_title(name)
            ax.set_xlabel("questions")
        fig.tight_layout()
        try:
            _prepare_(out_filename)
            fig.savefig(out_filename)
        except OSError as e:
            raise WriteFailure("Could not write {}: {}".format(out_filename, e)) from e
        finally:
            plt.close(fig)
        logging.info("Drawing question types to '%s'.", out_filename)
        return True


class RunManifestExporter(Exporter):
    """
    Writes the resolved configuration of a run together with the software
    environment it ran in.
    """

    def export(self, out_filename: str = "manifest.json", **extra):
        manifest = {"config": self.source, "environment": reproducibility.environment_fingerprint()}
        manifest.update(extra)
        write_json(out_filename, manifest)
