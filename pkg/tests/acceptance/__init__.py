# Desk-scale acceptance tests
