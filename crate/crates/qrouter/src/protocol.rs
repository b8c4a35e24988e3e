// routing protocol
