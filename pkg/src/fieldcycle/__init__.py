"""fieldcycle: simulation engine for field-cycling optical-DNP NMR experiments.

Submodules:
    fieldmap     magnet field profile B(z) and calibration
    shuttle      motion planning under eddy-current load limits
    spinmodel    polarization dynamics (T1, optical pumping, decay series)
    sequencer    pulse-program DSL, validation, event-stream compilation
    acquisition  per-window tone synthesis/extraction and analysis
    protocols    end-to-end experiment orchestration
    cli          command-line front end
"""

__version__ = "0.1.0"
