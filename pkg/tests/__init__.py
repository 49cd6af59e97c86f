# voxslice tests
