"""
报告模块初始化文件
"""
from .writer import records_frame, write_csv, read_csv, write_json, load_records, emit_report
from .charts import plot_records, plot_binned, plot_location, plot_transparency, plot_bars, series_gid

__all__ = [
    'records_frame', 'write_csv', 'read_csv', 'write_json', 'load_records', 'emit_report',
    'plot_records', 'plot_binned', 'plot_location', 'plot_transparency', 'plot_bars', 'series_gid'
]
