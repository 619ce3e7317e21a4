# Initialize the src package
