// state tomography
