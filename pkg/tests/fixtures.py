"""Hand-built DICOM fixture files for the ingest tests."""
from pathlib import Path

import numpy as np

from seqsort.dicom import MR_IMAGE_SOP_CLASS, SECONDARY_CAPTURE_SOP_CLASS, write_dicom

STUDY = "1.2.3.100"


def mr_attrs(series_uid, instance, *, study=STUDY, manufacturer="Philips Medical Systems", description="cine_SA",
             protocol=None, z=None, **extra):
    attrs = {
        "SOPClassUID": MR_IMAGE_SOP_CLASS,
        "SOPInstanceUID": f"{series_uid}.{instance}",
        "ImageType": ["ORIGINAL", "PRIMARY", "M"],
        "Modality": "MR",
        "Manufacturer": manufacturer,
        "SeriesDescription": description,
        "ProtocolName": protocol,
        "StudyInstanceUID": study,
        "SeriesInstanceUID": series_uid,
        "InstanceNumber": instance,
    }
    if z is not None:
        attrs["ImagePositionPatient"] = [0.0, 0.0, float(z)]
        attrs["ImageOrientationPatient"] = [1, 0, 0, 0, 1, 0]
    attrs.update(extra)
    return attrs


def write_mr(path: Path, series_uid, instance, pixels=None, explicit=True, **kw) -> Path:
    if pixels is None:
        pixels = np.full((4, 5), instance, dtype=np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dicom(path, mr_attrs(series_uid, instance, **kw), pixels, explicit=explicit)
    return path


def write_secondary(path: Path, by_uid_only=False) -> Path:
    attrs = mr_attrs("1.2.3.999", 1)
    if by_uid_only:
        attrs["SOPClassUID"] = SECONDARY_CAPTURE_SOP_CLASS
        attrs["ImageType"] = None
    else:
        attrs["ImageType"] = ["DERIVED", "SECONDARY"]
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dicom(path, attrs, np.zeros((4, 4), dtype=np.uint8))
    return path
