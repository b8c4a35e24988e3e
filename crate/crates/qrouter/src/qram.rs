// bucket-brigade qram
