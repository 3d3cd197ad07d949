# Utils package for the numerical helpers shared by the services
