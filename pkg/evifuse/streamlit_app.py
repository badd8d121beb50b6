import base64
import logging
import sys
from pathlib import Path

import streamlit as st
from PIL import Image
from streamlit import session_state as state

from evifuse.errors import EvifuseError
from evifuse.viewer import (
    RunView,
    boxes_figure,
    channel_figure,
    channel_names,
    metrics_barchart,
    status_barchart,
)

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

st.set_page_config(
    page_title="Pseudo-label inspector", layout="wide", initial_sidebar_state="expanded"
)


def download_link(val: str, filename: str, extension: str) -> str:
    """
    Create a download link for a file with the given content, filename, and extension.

    :param val: The content of the file to be downloaded.
    :param filename: The name of the file, without the extension.
    :param extension: The file extension (e.g., 'tsv', 'json').
    :return: An HTML string containing the download link.
    """
    logger.info(f"Creating download link for file: {filename}.{extension}")
    b64 = base64.b64encode(val.encode("utf-8"))
    return f'<a href="data:application/octet-stream;base64,{b64.decode()}" download="{filename}.{extension}">{extension}</a>'


def render_instances(view: RunView, image_id: str) -> None:
    """
    Render the instance table and box overlay of one image.

    :param view: The loaded run.
    :param image_id: The image to show.
    """
    rows = view.instances[view.instances.image_id == image_id]
    info = next(i for i in view.images if i.image_id == image_id)
    table, boxes = st.columns([6, 5])
    with table:
        st.dataframe(
            rows.set_index("instance_id"),
            use_container_width=True,
            column_config={"image_id": None, "confidence": st.column_config.NumberColumn(format="%.3f")},
        )
    with boxes:
        st.plotly_chart(boxes_figure(info, rows), use_container_width=True)


def render_evidence(view: RunView, image_id: str) -> None:
    """Show one channel of the heatmaps, attention and probability maps."""
    info = next(i for i in view.images if i.image_id == image_id)
    names = channel_names(info.labels.num_classes)
    class_id = st.selectbox("Class", list(names), format_func=names.get, key="evidence_class")
    columns = st.columns(3)
    for column, (folder, title, background) in zip(
        columns,
        [("heatmaps", "Object heatmap", False), ("attention", "Global attention", False), ("probability", "Probability", True)],
    ):
        stack = view.stack(folder, image_id, has_background=background)
        with column:
            if stack is None:
                st.info(f"No {folder} for {image_id}")
            else:
                channel = class_id + 1 if background else class_id
                st.plotly_chart(channel_figure(stack, channel, title), use_container_width=True)


def render_labels(view: RunView, image_id: str) -> None:
    preview = view.preview(image_id)
    if preview is None:
        st.info("No label preview; set write_previews in the configuration")
        return
    st.image(Image.open(preview), caption=f"{image_id} (white: uncertain)", use_column_width=True)


def render_metrics(view: RunView) -> None:
    """Render the per-class metric table with bar charts and downloads."""
    if not view.metrics:
        st.info("No metrics.json in this run")
        return
    st.json(view.metrics["summary"])
    per_class = view.metrics_table()
    st.dataframe(per_class, use_container_width=True)
    columns = [c for c in per_class.columns if c != "class"]
    if columns:
        column = st.selectbox("Measure", columns)
        st.plotly_chart(metrics_barchart(per_class, column), use_container_width=True)
    st.markdown(
        f'Download metrics as {download_link(per_class.to_csv(sep=chr(9), index=False), "metrics", "tsv")}',
        unsafe_allow_html=True,
    )


def main() -> None:
    """
    The main function of the Streamlit application.

    Loads a run directory given after ``--`` on the command line or typed in
    the sidebar and renders its instances, evidence maps, labels and metrics.
    """
    logger.info("Starting the Streamlit app")
    st.sidebar.title("Pseudo-label inspector")
    default = sys.argv[1] if len(sys.argv) > 1 else ""
    run_dir = st.sidebar.text_input("Run directory", value=default)
    if not run_dir:
        st.info("Enter a run directory")
        return
    try:
        state.view = RunView.load(Path(run_dir))
    except EvifuseError as e:
        logger.error(f"Failed to load {run_dir}: {e.message}")
        st.error(e.message)
        return
    view: RunView = state.view

    if view.report:
        with st.sidebar.expander(f"Run report ({view.report['status']})"):
            st.dataframe(view.stage_table(), hide_index=True)
    st.sidebar.plotly_chart(status_barchart(view.instances), use_container_width=True)

    image_id = st.sidebar.selectbox("Image", [i.image_id for i in view.images])
    instances, evidence, labels, metrics = st.tabs(["Instances", "Evidence", "Labels", "Metrics"])
    with instances:
        render_instances(view, image_id)
        st.markdown(
            f'Download all instances as {download_link(view.instances.to_csv(sep=chr(9), index=False), "instances", "tsv")}',
            unsafe_allow_html=True,
        )
    with evidence:
        render_evidence(view, image_id)
    with labels:
        render_labels(view, image_id)
    with metrics:
        render_metrics(view)
    logger.info("Finishing the Streamlit app")


if __name__ == "__main__":
    main()
